//! Regenerates the bundled `tracks/*.track` files.
//!
//! `cargo run -p overtake-core --example gen_tracks`

use std::f64::consts::PI;

use overtake_core::geom::Vec2;
use overtake_core::track::{TrackBuilder, TrackGeometry};

const HALF_WIDTH: f64 = 7.0;
const SPACING: f64 = 2.0;

fn oval() -> TrackGeometry {
    TrackBuilder::new(Vec2::ZERO, 0.0, SPACING)
        .straight(300.0)
        .arc(80.0, PI)
        .straight(300.0)
        .arc(80.0, PI)
        .build(HALF_WIDTH)
        .unwrap()
}

fn hairpin() -> TrackGeometry {
    TrackBuilder::new(Vec2::ZERO, 0.0, SPACING)
        .straight(500.0)
        .arc(80.0, PI / 2.0)
        .straight(200.0)
        .arc(25.0, PI)
        .straight(120.0)
        .arc(40.0, -PI / 2.0)
        .straight(490.0)
        .arc(60.0, PI)
        .build(HALF_WIDTH)
        .unwrap()
}

fn chicane() -> TrackGeometry {
    let b = TrackBuilder::new(Vec2::ZERO, 0.0, SPACING)
        .straight(600.0)
        .arc(90.0, PI)
        .straight(150.0)
        .arc(50.0, -PI / 6.0)
        .arc(50.0, PI / 3.0)
        .arc(50.0, -PI / 6.0);
    let end = b.position();
    b.straight(end.x).arc(end.y / 2.0, PI).build(HALF_WIDTH).unwrap()
}

fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tracks");
    for (name, track) in [("oval", oval()), ("hairpin", hairpin()), ("chicane", chicane())] {
        let path = dir.join(format!("{name}.track"));
        std::fs::write(&path, track.to_text()).unwrap();
        println!("{name}: {:.1} m, {} points", track.total_length(), track.control_points().len());
    }
}

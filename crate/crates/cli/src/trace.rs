//! Per-step trace export and an SVG overlay of the driven paths.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use overtake_core::env::{RaceEnv, TraceWriter};
use overtake_core::geom::Vec2;
use overtake_core::sensing::NormStats;
use overtake_core::track::TrackGeometry;
use overtake_core::Result;

use crate::eval::{Driver, EvalSetting, SUCCESS_MARGIN};

/// Pose of one car at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub position: Vec2,
    pub speed: f64,
    pub wall: bool,
    pub car: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Indexed by car, ego first; one point per executed step.
    pub paths: Vec<Vec<TracePoint>>,
    pub csv: String,
    pub steps: usize,
}

impl Trace {
    pub fn ego_speed_range(&self) -> (f64, f64) {
        self.paths[0].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.speed), hi.max(p.speed)))
    }
}

/// Runs one episode of `setting` and records every car at every step. The
/// episode ends on success or timeout exactly as in evaluation.
pub fn record_trace(driver: &mut dyn Driver, track: &str, stats: &Arc<NormStats>, setting: &EvalSetting, seed: u64) -> Result<Trace> {
    let config = setting.env_config(track);
    let mut env = RaceEnv::from_config(config.clone())?;
    env.set_stats(stats.clone())?;
    let mut last = env.reset(seed)?;
    let mut writer = TraceWriter::new(Vec::new())?;
    let mut paths = vec![Vec::new(); env.cars().len()];
    let mut steps = 0;
    while !last.done {
        driver.intervene(&mut env);
        let a = driver.act(&env, &last);
        last = env.step(a)?;
        steps += 1;
        writer.record(&env, &last)?;
        for (k, car) in env.cars().iter().enumerate() {
            paths[k].push(TracePoint {
                position: car.position,
                speed: car.speed,
                wall: last.info.wall_flags[k],
                car: last.info.car_flags[k],
            });
        }
        let p = &last.info.progress;
        if p.len() > 1 && p[1..].iter().all(|&o| p[0] - o >= SUCCESS_MARGIN) {
            break;
        }
    }
    let csv = String::from_utf8(writer.into_inner()).expect("trace rows are ASCII");
    Ok(Trace { paths, csv, steps })
}

fn speed_color(t: f64) -> String {
    // blue (slow) to red (fast)
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

fn points(pts: &[Vec2]) -> String {
    pts.iter().map(|p| format!("{:.2},{:.2}", p.x, -p.y)).collect::<Vec<_>>().join(" ")
}

/// SVG with the two walls as polylines, one `<path>` per car, speed-colored
/// segments over the ego path, and a marker for every contact step.
pub fn render_svg(track: &TrackGeometry, trace: &Trace) -> String {
    let (left, right) = track.boundaries();
    let all = left.iter().chain(&right);
    let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in all {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let pad = 20.0;
    let (w, h) = (hi.x - lo.x + 2.0 * pad, hi.y - lo.y + 2.0 * pad);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.2} {:.2} {:.2} {:.2}" width="{:.0}" height="{:.0}">"#,
        lo.x - pad,
        -hi.y - pad,
        w,
        h + 40.0,
        w,
        h + 40.0
    )
    .unwrap();
    for wall in [&left, &right] {
        let mut closed = wall.clone();
        closed.push(wall[0]);
        writeln!(s, r##"<polyline class="wall" fill="none" stroke="#222" stroke-width="0.8" points="{}"/>"##, points(&closed)).unwrap();
    }
    for (k, path) in trace.paths.iter().enumerate() {
        let d = path
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, p.position.x, -p.position.y))
            .collect::<String>();
        let (class, stroke) = if k == 0 { ("ego", "#999") } else { ("opponent", "#2a9d4a") };
        writeln!(s, r#"<path class="{class}" data-car="{k}" fill="none" stroke="{stroke}" stroke-width="0.6" d="{d}"/>"#).unwrap();
    }
    let (vmin, vmax) = trace.ego_speed_range();
    let span = (vmax - vmin).max(1e-9);
    writeln!(s, r#"<g class="ego-speed">"#).unwrap();
    for seg in trace.paths[0].windows(2) {
        let t = (0.5 * (seg[0].speed + seg[1].speed) - vmin) / span;
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.2"/>"#,
            seg[0].position.x,
            -seg[0].position.y,
            seg[1].position.x,
            -seg[1].position.y,
            speed_color(t)
        )
        .unwrap();
    }
    writeln!(s, "</g>").unwrap();
    writeln!(s, r#"<g class="contacts">"#).unwrap();
    for (k, path) in trace.paths.iter().enumerate() {
        for p in path.iter().filter(|p| p.wall || p.car) {
            let color = if p.car { "#d62728" } else { "#ff7f0e" };
            writeln!(s, r#"<circle data-car="{k}" cx="{:.2}" cy="{:.2}" r="1.5" fill="{color}"/>"#, p.position.x, -p.position.y).unwrap();
        }
    }
    writeln!(s, "</g>").unwrap();
    let (x0, y0) = (lo.x - pad + 10.0, -lo.y + pad + 10.0);
    writeln!(s, r#"<g class="speed-scale" data-min="{vmin}" data-max="{vmax}">"#).unwrap();
    writeln!(s, r#"<rect x="{x0:.2}" y="{y0:.2}" width="20" height="8" fill="{}"/>"#, speed_color(0.0)).unwrap();
    writeln!(s, r#"<rect x="{:.2}" y="{y0:.2}" width="20" height="8" fill="{}"/>"#, x0 + 80.0, speed_color(1.0)).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="8">{vmin:.1} m/s</text>"#, x0 + 22.0, y0 + 7.0).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="8">{vmax:.1} m/s</text>"#, x0 + 102.0, y0 + 7.0).unwrap();
    writeln!(s, "</g>").unwrap();
    s.push_str("</svg>\n");
    s
}

/// Writes `trace.csv` and `trace.svg` into `out`; returns both paths.
pub fn export_trace(
    driver: &mut dyn Driver,
    track_id: &str,
    stats: &Arc<NormStats>,
    setting: &EvalSetting,
    seed: u64,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let trace = record_trace(driver, track_id, stats, setting, seed)?;
    let track = TrackGeometry::load(track_id)?;
    fs::create_dir_all(out)?;
    let csv = out.join("trace.csv");
    let svg = out.join("trace.svg");
    fs::write(&csv, &trace.csv)?;
    fs::write(&svg, render_svg(&track, &trace))?;
    Ok((csv, svg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{BuiltinDriver, SettingId};

    fn trace() -> Trace {
        let stats = Arc::new(NormStats::identity());
        let setting = EvalSetting::new(SettingId::A);
        record_trace(&mut BuiltinDriver { speed_scale: 1.2 }, "oval", &stats, &setting, 3).unwrap()
    }

    #[test]
    fn csv_has_one_row_per_car_and_step() {
        let t = trace();
        let rows = t.csv.lines().count() - 1;
        assert_eq!(rows, t.steps * 6);
        assert!(t.paths.iter().all(|p| p.len() == t.steps));
    }

    #[test]
    fn svg_structure() {
        let t = trace();
        let svg = render_svg(&TrackGeometry::load("oval").unwrap(), &t);
        assert_eq!(svg.matches("<path ").count(), 6);
        assert_eq!(svg.matches("<polyline ").count(), 2);
        let (lo, hi) = t.ego_speed_range();
        assert!(svg.contains(&format!(r#"data-min="{lo}" data-max="{hi}""#)));
        let speeds: Vec<f64> = t.csv.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("0")).map(|l| l.split(',').nth(5).unwrap().parse().unwrap()).collect();
        let csv_lo = speeds.iter().cloned().fold(f64::INFINITY, f64::min);
        let csv_hi = speeds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((csv_lo - lo).abs() < 1e-6 && (csv_hi - hi).abs() < 1e-6);
    }
}

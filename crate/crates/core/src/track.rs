//! Closed racing tracks.
//!
//! A track is a piecewise-linear closed centerline with a constant half width.
//! Course progress (`cp`) is the arc length of the closest centerline point.
//! Curvature is estimated per vertex from the circle through each consecutive
//! triple of control points and interpolated linearly along segments.

use std::fmt::Write as _;
use std::path::Path;

use crate::geom::{wrap_angle, Segment, Vec2};
use crate::{Result, SimError};

/// Number of forward curvature samples in the observation.
pub const LOOKAHEAD_LEN: usize = 14;

/// 14 lookahead times spanning 0.2 s to 3.0 s inclusive.
pub const LOOKAHEAD_TIMES: [f64; LOOKAHEAD_LEN] = lookahead_times();

const fn lookahead_times() -> [f64; LOOKAHEAD_LEN] {
    let mut out = [0.0; LOOKAHEAD_LEN];
    let mut j = 0;
    while j < LOOKAHEAD_LEN {
        out[j] = 0.2 + j as f64 * (2.8 / 13.0);
        j += 1;
    }
    out
}

pub const BUNDLED_TRACKS: [&str; 3] = ["oval", "hairpin", "chicane"];

/// Position of a point relative to the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackFrame {
    /// Course progress in `[0, total_length)`.
    pub arc_length: f64,
    /// Signed distance from the centerline, positive to the left of travel.
    pub lateral_offset: f64,
    pub tangent_heading: f64,
}

#[derive(Debug, Clone)]
pub struct TrackGeometry {
    points: Vec<Vec2>,
    half_width: f64,
    /// Cumulative arc length at each vertex; `cum[n] == total_length`.
    cum: Vec<f64>,
    seg_len: Vec<f64>,
    tangents: Vec<Vec2>,
    curvature: Vec<f64>,
    total_length: f64,
    walls: Vec<Segment>,
}

impl TrackGeometry {
    pub fn new(points: Vec<Vec2>, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(SimError::config(format!("half width must be > 0, got {half_width}")));
        }
        if points.len() < 4 {
            return Err(SimError::config(format!(
                "a track needs at least 4 control points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(SimError::config(format!("non-finite control point {p:?}")));
        }
        let n = points.len();
        let mut seg_len = Vec::with_capacity(n);
        let mut tangents = Vec::with_capacity(n);
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        for i in 0..n {
            let d = points[(i + 1) % n] - points[i];
            let len = d.norm();
            if len < 1e-6 {
                return Err(SimError::config(format!(
                    "control points {i} and {} coincide",
                    (i + 1) % n
                )));
            }
            seg_len.push(len);
            tangents.push(d * (1.0 / len));
            cum.push(cum[i] + len);
        }
        let total_length = cum[n];

        let curvature = (0..n)
            .map(|i| circumcircle_curvature(points[(i + n - 1) % n], points[i], points[(i + 1) % n]))
            .collect();

        let mut track = TrackGeometry {
            points,
            half_width,
            cum,
            seg_len,
            tangents,
            curvature,
            total_length,
            walls: Vec::new(),
        };
        track.walls = track.build_walls();
        Ok(track)
    }

    fn build_walls(&self) -> Vec<Segment> {
        let n = self.points.len();
        let offset = |i: usize, side: f64| {
            let prev = self.tangents[(i + n - 1) % n].perp();
            let next = self.tangents[i].perp();
            let bis = (prev + next).normalized();
            let cos_half = bis.dot(next).max(0.5);
            self.points[i] + bis * (side * self.half_width / cos_half)
        };
        let left: Vec<Vec2> = (0..n).map(|i| offset(i, 1.0)).collect();
        let right: Vec<Vec2> = (0..n).map(|i| offset(i, -1.0)).collect();
        let mut walls = Vec::with_capacity(2 * n);
        for side in [&left, &right] {
            for i in 0..n {
                walls.push(Segment::new(side[i], side[(i + 1) % n]));
            }
        }
        walls
    }

    pub fn control_points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn segment_lengths(&self) -> &[f64] {
        &self.seg_len
    }

    pub fn vertex_curvatures(&self) -> &[f64] {
        &self.curvature
    }

    /// Wall polylines as segments: left boundary first, then right.
    pub fn walls(&self) -> &[Segment] {
        &self.walls
    }

    /// Closed left and right boundary polylines (vertex lists).
    pub fn boundaries(&self) -> (Vec<Vec2>, Vec<Vec2>) {
        let n = self.points.len();
        let left = self.walls[..n].iter().map(|s| s.a).collect();
        let right = self.walls[n..].iter().map(|s| s.a).collect();
        (left, right)
    }

    pub fn wrap_arc(&self, s: f64) -> f64 {
        let w = s.rem_euclid(self.total_length);
        // rem_euclid can round up to the modulus itself
        if w >= self.total_length {
            0.0
        } else {
            w
        }
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = self.wrap_arc(s);
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
        .min(self.points.len() - 1);
        let t = ((s - self.cum[i]) / self.seg_len[i]).clamp(0.0, 1.0);
        (i, t)
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.segment_at(s);
        self.points[i] + self.tangents[i] * (t * self.seg_len[i])
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.tangents[self.segment_at(s).0].angle()
    }

    /// Signed curvature (positive = turning left) at arc length `s`.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let n = self.points.len();
        let (i, t) = self.segment_at(s);
        let k0 = self.curvature[i];
        let k1 = self.curvature[(i + 1) % n];
        if k0 == k1 {
            k0
        } else {
            (1.0 - t) * k0 + t * k1
        }
    }

    /// Frame of the closest centerline point. Equidistant candidates resolve to
    /// the lowest arc length.
    pub fn centerline_projection(&self, p: Vec2) -> TrackFrame {
        let mut best_d2 = f64::INFINITY;
        let mut best = (0usize, 0.0f64);
        for (i, (&a, &tan)) in self.points.iter().zip(&self.tangents).enumerate() {
            let along = ((p - a).dot(tan)).clamp(0.0, self.seg_len[i]);
            let foot = a + tan * along;
            let d2 = (p - foot).norm_sq();
            if d2 < best_d2 {
                best_d2 = d2;
                best = (i, along);
            }
        }
        let (i, along) = best;
        let tan = self.tangents[i];
        let foot = self.points[i] + tan * along;
        let side = tan.cross(p - foot);
        let dist = best_d2.sqrt();
        TrackFrame {
            arc_length: self.wrap_arc(self.cum[i] + along),
            lateral_offset: if side < 0.0 { -dist } else { dist },
            tangent_heading: tan.angle(),
        }
    }

    /// Signed shortest loop difference `curr - prev`, both in `[0, total_length)`.
    pub fn progress_delta(&self, cp_prev: f64, cp_curr: f64) -> Result<f64> {
        let range = 0.0..self.total_length;
        if !range.contains(&cp_prev) || !range.contains(&cp_curr) {
            return Err(SimError::contract(format!(
                "course progress outside [0, {}): prev {cp_prev}, curr {cp_curr}",
                self.total_length
            )));
        }
        Ok(self.wrap_delta(cp_curr - cp_prev))
    }

    /// Maps any difference of arc lengths into `(-L/2, L/2]`.
    pub fn wrap_delta(&self, d: f64) -> f64 {
        let l = self.total_length;
        // in-range differences pass through untouched so gate comparisons stay exact
        if d > -0.5 * l && d <= 0.5 * l {
            return d;
        }
        let mut w = d.rem_euclid(l);
        if w > 0.5 * l {
            w -= l;
        }
        w
    }

    /// Curvature at `speed * t` ahead of `frame` for each lookahead time.
    pub fn curvature_lookahead(
        &self,
        frame: &TrackFrame,
        speed: f64,
        horizon_times: &[f64; LOOKAHEAD_LEN],
    ) -> [f64; LOOKAHEAD_LEN] {
        let speed = speed.max(0.0);
        horizon_times.map(|t| self.curvature_at(frame.arc_length + speed * t))
    }

    /// Distance to the nearer wall; negative beyond it.
    pub fn wall_distance(&self, frame: &TrackFrame) -> f64 {
        self.half_width - frame.lateral_offset.abs()
    }

    pub fn heading_error(&self, heading: f64, frame: &TrackFrame) -> f64 {
        wrap_angle(heading - frame.tangent_heading)
    }

    /// Parses the text track format: a `halfwidth <m>` header followed by one
    /// `x y` control point per line. `#` starts a comment. A trailing point
    /// equal to the first one is treated as an explicit closure and dropped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut half_width = None;
        let mut points = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let first = fields.next().unwrap();
            if half_width.is_none() {
                if first != "halfwidth" {
                    return Err(SimError::Parse {
                        line: line_no,
                        msg: "expected `halfwidth <meters>` header".into(),
                    });
                }
                let v = fields.next().and_then(|f| f.parse::<f64>().ok()).ok_or(SimError::Parse {
                    line: line_no,
                    msg: "missing or invalid half width".into(),
                })?;
                half_width = Some(v);
                continue;
            }
            let parse = |f: Option<&str>| -> Result<f64> {
                f.and_then(|f| f.parse::<f64>().ok()).ok_or(SimError::Parse {
                    line: line_no,
                    msg: format!("expected `x y`, got `{line}`"),
                })
            };
            let x = parse(Some(first))?;
            let y = parse(fields.next())?;
            if fields.next().is_some() {
                return Err(SimError::Parse {
                    line: line_no,
                    msg: format!("trailing fields in `{line}`"),
                });
            }
            points.push(Vec2::new(x, y));
        }
        let half_width = half_width.ok_or(SimError::Parse {
            line: 0,
            msg: "empty track file".into(),
        })?;
        if points.len() > 1 && points[0].distance(*points.last().unwrap()) < 1e-6 {
            points.pop();
        }
        TrackGeometry::new(points, half_width)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("halfwidth {}\n", self.half_width);
        for p in &self.points {
            let _ = writeln!(out, "{:.6} {:.6}", p.x, p.y);
        }
        out
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name {
            "oval" => include_str!("../tracks/oval.track"),
            "hairpin" => include_str!("../tracks/hairpin.track"),
            "chicane" => include_str!("../tracks/chicane.track"),
            other => {
                return Err(SimError::config(format!(
                    "unknown bundled track `{other}` (known: {})",
                    BUNDLED_TRACKS.join(", ")
                )))
            }
        };
        TrackGeometry::parse(text)
    }

    /// Loads a bundled track by name, or a track file by path.
    pub fn load(id: &str) -> Result<Self> {
        if BUNDLED_TRACKS.contains(&id) {
            return TrackGeometry::bundled(id);
        }
        let path = Path::new(id);
        if !path.exists() {
            return Err(SimError::config(format!(
                "track `{id}` is neither a bundled track ({}) nor a file",
                BUNDLED_TRACKS.join(", ")
            )));
        }
        TrackGeometry::parse(&std::fs::read_to_string(path)?)
    }
}

fn circumcircle_curvature(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let ab = b - a;
    let bc = c - b;
    let ac = c - a;
    let cross = ab.cross(bc);
    let denom = ab.norm() * bc.norm() * ac.norm();
    // collinear within rounding: a straight run has exactly zero curvature
    if cross.abs() <= 1e-12 * ab.norm() * bc.norm() || denom == 0.0 {
        0.0
    } else {
        2.0 * cross / denom
    }
}

/// Turtle-style construction of closed centerlines from straights and arcs.
#[derive(Debug, Clone)]
pub struct TrackBuilder {
    points: Vec<Vec2>,
    pos: Vec2,
    heading: f64,
    spacing: f64,
}

impl TrackBuilder {
    pub fn new(start: Vec2, heading: f64, spacing: f64) -> Self {
        TrackBuilder {
            points: vec![start],
            pos: start,
            heading,
            spacing,
        }
    }

    pub fn straight(mut self, length: f64) -> Self {
        let steps = (length / self.spacing).ceil().max(1.0) as usize;
        let start = self.pos;
        let dir = Vec2::from_angle(self.heading);
        for k in 1..=steps {
            self.points.push(start + dir * (length * k as f64 / steps as f64));
        }
        self.pos = start + dir * length;
        self
    }

    /// Circular arc; positive `angle` (radians) turns left.
    pub fn arc(mut self, radius: f64, angle: f64) -> Self {
        let side = angle.signum();
        let center = self.pos + Vec2::from_angle(self.heading).perp() * (side * radius);
        let max_step = (self.spacing / radius).min(0.1);
        let steps = (angle.abs() / max_step).ceil().max(1.0) as usize;
        let start = self.pos - center;
        for k in 1..=steps {
            let phi = angle * k as f64 / steps as f64;
            self.points.push(center + start.rotate(phi));
        }
        self.pos = center + start.rotate(angle);
        self.heading += angle;
        self
    }

    pub fn position(&self) -> Vec2 {
        self.pos
    }

    pub fn build(mut self, half_width: f64) -> Result<TrackGeometry> {
        let first = self.points[0];
        let gap = first.distance(self.pos);
        if gap > 1e-3 {
            return Err(SimError::config(format!("track does not close: end is {gap} m from start")));
        }
        self.points.pop();
        TrackGeometry::new(self.points, half_width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn circle(radius: f64, n: usize) -> TrackGeometry {
        let pts = (0..n)
            .map(|i| Vec2::from_angle(2.0 * PI * i as f64 / n as f64) * radius)
            .collect();
        TrackGeometry::new(pts, 6.0).unwrap()
    }

    /// Long thin rectangle whose bottom edge is the x axis from 0 to 1000.
    fn long_straight() -> TrackGeometry {
        let mut pts: Vec<Vec2> = (0..=100).map(|i| Vec2::new(10.0 * i as f64, 0.0)).collect();
        pts.push(Vec2::new(1000.0, 500.0));
        pts.push(Vec2::new(0.0, 500.0));
        TrackGeometry::new(pts, 6.0).unwrap()
    }

    #[test]
    fn straight_projection() {
        let t = long_straight();
        let f = t.centerline_projection(Vec2::new(123.4, 2.0));
        assert!((f.arc_length - 123.4).abs() < 1e-9);
        assert!((f.lateral_offset - 2.0).abs() < 1e-12);
        assert_eq!(t.curvature_at(55.0), 0.0);
        assert_eq!(t.curvature_at(500.0), 0.0);
    }

    #[test]
    fn invariants_on_construction() {
        let t = circle(100.0, 628);
        let sum: f64 = t.segment_lengths().iter().sum();
        assert!(((sum - t.total_length()) / sum).abs() < 1e-9);
        for k in t.vertex_curvatures() {
            assert!((k - 0.01).abs() < 0.01 * 0.02);
        }
        assert!(TrackGeometry::new(vec![Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)], 1.0).is_err());
        assert!(TrackGeometry::new(t.control_points().to_vec(), 0.0).is_err());
    }

    #[test]
    fn progress_delta_wraps() {
        let t = long_straight();
        let l = t.total_length();
        let t2 = circle(1000.0 / (2.0 * PI), 2000);
        assert!((t2.total_length() - 1000.0).abs() < 0.01);
        let scale = t2.total_length() / 1000.0;
        let d = t2.progress_delta(998.0 * scale, 3.0 * scale).unwrap();
        assert!((d - 5.0 * scale).abs() < 1e-9);
        let d = t2.progress_delta(3.0 * scale, 998.0 * scale).unwrap();
        assert!((d + 5.0 * scale).abs() < 1e-9);
        assert!((t.progress_delta(100.0, 102.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(t.progress_delta(-1.0, 2.0).is_err());
        assert!(t.progress_delta(1.0, l).is_err());
    }

    #[test]
    fn lookahead_grid_and_values() {
        assert!((LOOKAHEAD_TIMES[0] - 0.2).abs() < 1e-15);
        assert!((LOOKAHEAD_TIMES[13] - 3.0).abs() < 1e-12);
        let t = long_straight();
        let f = t.centerline_projection(Vec2::new(100.0, 0.0));
        assert_eq!(t.curvature_lookahead(&f, 30.0, &LOOKAHEAD_TIMES), [0.0; 14]);

        let c = circle(50.0, 400);
        let f = c.centerline_projection(Vec2::new(50.0, 0.0));
        for k in c.curvature_lookahead(&f, 25.0, &LOOKAHEAD_TIMES) {
            assert!((k.abs() - 0.02).abs() < 0.02 * 0.02);
        }
        let here = c.curvature_at(f.arc_length);
        assert_eq!(c.curvature_lookahead(&f, 0.0, &LOOKAHEAD_TIMES), [here; 14]);
    }

    #[test]
    fn wall_distance_sign() {
        let t = long_straight();
        let frame = |lat| TrackFrame { arc_length: 0.0, lateral_offset: lat, tangent_heading: 0.0 };
        assert_eq!(t.wall_distance(&frame(2.0)), 4.0);
        assert_eq!(t.wall_distance(&frame(0.0)), 6.0);
        assert_eq!(t.wall_distance(&frame(7.0)), -1.0);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let t = circle(80.0, 100);
        let back = TrackGeometry::parse(&t.to_text()).unwrap();
        assert_eq!(back.control_points().len(), 100);
        assert!((back.total_length() - t.total_length()).abs() < 1e-3);

        let closed = "halfwidth 5\n0 0\n10 0\n10 10\n0 10\n0 0\n";
        assert_eq!(TrackGeometry::parse(closed).unwrap().control_points().len(), 4);
        assert!(matches!(TrackGeometry::parse("0 0\n1 1\n"), Err(SimError::Parse { line: 1, .. })));
        assert!(matches!(
            TrackGeometry::parse("halfwidth 5\n0 0\n1 x\n"),
            Err(SimError::Parse { line: 3, .. })
        ));
        assert!(TrackGeometry::parse("halfwidth 5\n0 0\n0 0\n1 1\n2 0\n").is_err());
    }

    #[test]
    fn bundled_tracks_load() {
        for name in BUNDLED_TRACKS {
            let t = TrackGeometry::bundled(name).unwrap();
            assert!(t.total_length() > 1000.0, "{name} too short for 5 x 200 m layouts");
            assert_eq!(t.half_width(), 7.0);
        }
        assert!(TrackGeometry::load("nope").is_err());
    }

    #[test]
    fn builder_closes_loop() {
        let t = TrackBuilder::new(Vec2::ZERO, 0.0, 2.0)
            .straight(100.0)
            .arc(30.0, PI)
            .straight(100.0)
            .arc(30.0, PI)
            .build(5.0)
            .unwrap();
        assert!((t.total_length() - (200.0 + 60.0 * PI)).abs() < 0.1);
        assert!(TrackBuilder::new(Vec2::ZERO, 0.0, 2.0).straight(10.0).arc(5.0, PI).build(1.0).is_err());
    }
}

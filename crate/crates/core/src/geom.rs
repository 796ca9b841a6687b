//! Planar vector math, rays, segments and oriented rectangles.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is counter-clockwise of `self`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    /// Counter-clockwise perpendicular (the "left" of a direction of travel).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub fn new(a: Vec2, b: Vec2) -> Self {
        Segment { a, b }
    }

    /// Distance along a unit-direction ray to this segment, if hit.
    pub fn ray_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        let e = self.b - self.a;
        let denom = dir.cross(e);
        if denom.abs() < 1e-12 {
            return None;
        }
        let w = self.a - origin;
        let t = w.cross(e) / denom;
        let u = w.cross(dir) / denom;
        if t >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&u) {
            Some(t)
        } else {
            None
        }
    }

    /// Squared distance from `p` to the closest point of the segment.
    pub fn distance_sq(&self, p: Vec2) -> f64 {
        let e = self.b - self.a;
        let len2 = e.norm_sq();
        let t = if len2 > 0.0 {
            ((p - self.a).dot(e) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (self.a + e * t - p).norm_sq()
    }
}

/// A car footprint: rectangle centered at `center`, long axis along `heading`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        OrientedRect {
            center,
            heading,
            half_length: 0.5 * length,
            half_width: 0.5 * width,
        }
    }

    pub fn axes(&self) -> (Vec2, Vec2) {
        let fwd = Vec2::from_angle(self.heading);
        (fwd, fwd.perp())
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let (f, l) = self.axes();
        let fl = f * self.half_length;
        let lw = l * self.half_width;
        [
            self.center + fl + lw,
            self.center - fl + lw,
            self.center - fl - lw,
            self.center + fl - lw,
        ]
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let (f, l) = self.axes();
        let d = p - self.center;
        d.dot(f).abs() <= self.half_length && d.dot(l).abs() <= self.half_width
    }

    /// Entry distance of a unit-direction ray (slab test in the local frame).
    /// A ray starting inside reports 0.
    pub fn ray_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        let (f, l) = self.axes();
        let d = origin - self.center;
        let o = [d.dot(f), d.dot(l)];
        let v = [dir.dot(f), dir.dot(l)];
        let h = [self.half_length, self.half_width];
        let mut t_min = 0.0_f64;
        let mut t_max = f64::INFINITY;
        for k in 0..2 {
            if v[k].abs() < 1e-15 {
                if o[k].abs() > h[k] {
                    return None;
                }
            } else {
                let t1 = (-h[k] - o[k]) / v[k];
                let t2 = (h[k] - o[k]) / v[k];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                t_min = t_min.max(lo);
                t_max = t_max.min(hi);
                if t_min > t_max {
                    return None;
                }
            }
        }
        Some(t_min)
    }

    /// Separating-axis test. Returns the minimum translation (unit axis pointing
    /// from `self` toward `other`, penetration depth) when the rectangles overlap.
    pub fn overlap(&self, other: &OrientedRect) -> Option<(Vec2, f64)> {
        let r = self.bounding_radius() + other.bounding_radius();
        let delta = other.center - self.center;
        if delta.norm_sq() > r * r {
            return None;
        }
        let (f1, l1) = self.axes();
        let (f2, l2) = other.axes();
        let mut best: Option<(Vec2, f64)> = None;
        for axis in [f1, l1, f2, l2] {
            let ra = self.half_length * f1.dot(axis).abs() + self.half_width * l1.dot(axis).abs();
            let rb = other.half_length * f2.dot(axis).abs() + other.half_width * l2.dot(axis).abs();
            let dist = delta.dot(axis);
            let depth = ra + rb - dist.abs();
            if depth <= 0.0 {
                return None;
            }
            if best.map_or(true, |(_, d)| depth < d) {
                let oriented = if dist < 0.0 { -axis } else { axis };
                best = Some((oriented, depth));
            }
        }
        best
    }
}

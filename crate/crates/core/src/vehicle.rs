//! Kinematic bicycle plant and the rule-based opponent driver.

use std::f64::consts::FRAC_PI_6;

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, OrientedRect, Vec2};
use crate::track::TrackGeometry;
use crate::{Result, SimError};

pub const MAX_STEERING: f64 = FRAC_PI_6;

/// Lateral acceleration budget of the built-in driver's speed profile.
pub const AI_LATERAL_ACCEL: f64 = 6.0;
const AI_SPEED_GAIN: f64 = 0.5;
const AI_MIN_LOOKAHEAD: f64 = 5.0;
const AI_LOOKAHEAD_TIME: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarParams {
    pub wheelbase: f64,
    pub max_accel: f64,
    pub max_brake_decel: f64,
    /// Quadratic drag; `max_accel == drag_coeff * top_speed^2`.
    pub drag_coeff: f64,
    pub top_speed: f64,
    pub body_length: f64,
    pub body_width: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        CarParams::new(2.5, 6.0, 10.0, 55.0, 4.2, 1.8)
    }
}

impl CarParams {
    /// Drag is derived so that full throttle saturates exactly at `top_speed`.
    pub fn new(
        wheelbase: f64,
        max_accel: f64,
        max_brake_decel: f64,
        top_speed: f64,
        body_length: f64,
        body_width: f64,
    ) -> Self {
        CarParams {
            wheelbase,
            max_accel,
            max_brake_decel,
            drag_coeff: max_accel / (top_speed * top_speed),
            top_speed,
            body_length,
            body_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.wheelbase,
            self.max_accel,
            self.max_brake_decel,
            self.drag_coeff,
            self.top_speed,
            self.body_length,
            self.body_width,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SimError::config(format!("car parameters must be positive: {self:?}")));
        }
        let implied = self.drag_coeff * self.top_speed * self.top_speed;
        if (implied - self.max_accel).abs() > 1e-6 * self.max_accel {
            return Err(SimError::config(format!(
                "drag {} with top speed {} implies max accel {implied}, not {}",
                self.drag_coeff, self.top_speed, self.max_accel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action {
    /// Radians, positive steers left.
    pub steering: f64,
    /// Throttle when positive, brake when negative.
    pub pedal: f64,
}

impl Action {
    pub fn new(steering: f64, pedal: f64) -> Self {
        Action { steering, pedal }
    }

    /// Maps a squashed policy output in `[-1, 1]^2` onto the action bounds.
    pub fn from_unit(unit: [f64; 2]) -> Self {
        Action {
            steering: unit[0].clamp(-1.0, 1.0) * MAX_STEERING,
            pedal: unit[1].clamp(-1.0, 1.0),
        }
    }

    pub fn to_unit(self) -> [f64; 2] {
        [self.steering / MAX_STEERING, self.pedal]
    }
}

pub fn clamp_action(steering: f64, pedal: f64) -> Result<Action> {
    if steering.is_nan() || pedal.is_nan() {
        return Err(SimError::contract(format!("NaN action ({steering}, {pedal})")));
    }
    Ok(Action {
        steering: steering.clamp(-MAX_STEERING, MAX_STEERING),
        pedal: pedal.clamp(-1.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub position: Vec2,
    pub heading: f64,
    /// Longitudinal, lateral, vertical. Only the first is ever nonzero.
    pub body_velocity: [f64; 3],
    pub body_acceleration: [f64; 3],
    pub speed: f64,
    pub prev_steering: f64,
    pub wall_flag: bool,
    pub car_flag: bool,
}

impl VehicleState {
    pub fn at_rest(position: Vec2, heading: f64) -> Self {
        VehicleState {
            position,
            heading,
            ..Default::default()
        }
    }

    pub fn moving(position: Vec2, heading: f64, speed: f64) -> Self {
        VehicleState {
            position,
            heading,
            speed,
            body_velocity: [speed, 0.0, 0.0],
            ..Default::default()
        }
    }

    pub fn footprint(&self, params: &CarParams) -> OrientedRect {
        OrientedRect::new(self.position, self.heading, params.body_length, params.body_width)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }

    pub fn set_speed(&mut self, speed: f64) {
        self.speed = speed;
        self.body_velocity = [speed, 0.0, 0.0];
    }

    fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.heading.is_finite()
            && self.speed.is_finite()
            && self.prev_steering.is_finite()
    }
}

/// One semi-implicit Euler step: speed and heading update first, then the
/// position advances at the new speed along the new heading. Collision flags
/// are cleared; the environment sets them after contact detection.
pub fn step_vehicle(state: &VehicleState, action: Action, params: &CarParams, dt: f64) -> Result<VehicleState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::contract(format!("dt must be positive, got {dt}")));
    }
    if !state.is_finite() || !action.steering.is_finite() || !action.pedal.is_finite() {
        return Err(SimError::contract("non-finite vehicle state or action"));
    }
    let drag = params.drag_coeff * state.speed * state.speed;
    let accel = if action.pedal >= 0.0 {
        action.pedal * params.max_accel
    } else {
        action.pedal * params.max_brake_decel
    } - drag;
    let speed = (state.speed + accel * dt).clamp(0.0, params.top_speed);
    let yaw_rate = speed * action.steering.tan() / params.wheelbase;
    let heading = if yaw_rate == 0.0 {
        state.heading
    } else {
        wrap_angle(state.heading + yaw_rate * dt)
    };
    let position = state.position + Vec2::from_angle(heading) * (speed * dt);
    Ok(VehicleState {
        position,
        heading,
        body_velocity: [speed, 0.0, 0.0],
        body_acceleration: [(speed - state.speed) / dt, 0.0, 0.0],
        speed,
        prev_steering: action.steering,
        wall_flag: false,
        car_flag: false,
    })
}

/// Curvature-limited cruising speed of the built-in driver at arc length `s`.
pub fn builtin_target_speed(track: &TrackGeometry, s: f64, params: &CarParams, target_speed_scale: f64) -> f64 {
    let kappa = track.curvature_at(s).abs().max(1e-6);
    target_speed_scale * params.top_speed.min((AI_LATERAL_ACCEL / kappa).sqrt())
}

/// Pure pursuit toward a centerline point ahead plus a proportional speed loop.
pub fn builtin_ai_action(
    state: &VehicleState,
    track: &TrackGeometry,
    params: &CarParams,
    target_speed_scale: f64,
) -> Action {
    let frame = track.centerline_projection(state.position);
    let lookahead = AI_MIN_LOOKAHEAD.max(AI_LOOKAHEAD_TIME * state.speed);
    let s_target = frame.arc_length + lookahead;
    let to_target = track.point_at(s_target) - state.position;
    let alpha = wrap_angle(to_target.angle() - state.heading);
    let dist = to_target.norm().max(1e-3);
    let steering = (2.0 * params.wheelbase * alpha.sin() / dist).atan();
    let v_target = builtin_target_speed(track, s_target, params, target_speed_scale);
    let pedal = AI_SPEED_GAIN * (v_target - state.speed);
    Action {
        steering: steering.clamp(-MAX_STEERING, MAX_STEERING),
        pedal: pedal.clamp(-1.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::TrackBuilder;
    use std::f64::consts::PI;

    fn straight_track() -> TrackGeometry {
        TrackBuilder::new(Vec2::ZERO, 0.0, 5.0)
            .straight(1000.0)
            .arc(100.0, PI)
            .straight(1000.0)
            .arc(100.0, PI)
            .build(6.0)
            .unwrap()
    }

    #[test]
    fn defaults_are_consistent() {
        let p = CarParams::default();
        p.validate().unwrap();
        assert!((p.drag_coeff * 55.0 * 55.0 - 6.0).abs() < 1e-12);
        let mut bad = p;
        bad.drag_coeff *= 2.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clamp_action_cases() {
        let a = clamp_action(1.0, 2.0).unwrap();
        assert_eq!((a.steering, a.pedal), (FRAC_PI_6, 1.0));
        let a = clamp_action(-0.1, -0.5).unwrap();
        assert_eq!((a.steering, a.pedal), (-0.1, -0.5));
        let a = clamp_action(-9.0, -9.0).unwrap();
        assert_eq!((a.steering, a.pedal), (-FRAC_PI_6, -1.0));
        assert!(clamp_action(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn rest_is_equilibrium() {
        let mut s = VehicleState::at_rest(Vec2::new(3.0, 4.0), 0.7);
        s.wall_flag = true;
        s.car_flag = true;
        let next = step_vehicle(&s, Action::default(), &CarParams::default(), 0.1).unwrap();
        let mut expect = s;
        expect.wall_flag = false;
        expect.car_flag = false;
        assert_eq!(next, expect);
    }

    #[test]
    fn semi_implicit_euler_displacement() {
        let mut p = CarParams::default();
        p.drag_coeff = 0.0;
        p.max_accel = 5.0;
        let s = VehicleState::moving(Vec2::ZERO, 0.0, 10.0);
        let next = step_vehicle(&s, Action::new(0.0, 1.0), &p, 0.1).unwrap();
        assert!((next.speed - 10.5).abs() < 1e-12);
        assert!((next.position.x - 1.05).abs() < 1e-12);
        assert_eq!(next.position.y, 0.0);
        assert!((next.body_acceleration[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn constant_steering_traces_circle() {
        let mut p = CarParams::default();
        p.drag_coeff = 0.0;
        let mut s = VehicleState::moving(Vec2::ZERO, 0.0, 20.0);
        let mut pts = Vec::new();
        for _ in 0..500 {
            s = step_vehicle(&s, Action::new(0.1, 0.0), &p, 0.1).unwrap();
            pts.push(s.position);
        }
        // Kasa algebraic circle fit: x^2 + y^2 + D x + E y + F = 0
        let (mut sxx, mut sxy, mut syy, mut sx, mut sy, n) = (0.0, 0.0, 0.0, 0.0, 0.0, pts.len() as f64);
        let (mut sxz, mut syz, mut sz) = (0.0, 0.0, 0.0);
        for q in &pts {
            let z = q.x * q.x + q.y * q.y;
            sxx += q.x * q.x;
            sxy += q.x * q.y;
            syy += q.y * q.y;
            sx += q.x;
            sy += q.y;
            sxz += q.x * z;
            syz += q.y * z;
            sz += z;
        }
        // normal equations for [D, E, F]
        let a = [[sxx, sxy, sx], [sxy, syy, sy], [sx, sy, n]];
        let b = [-sxz, -syz, -sz];
        let sol = solve3(a, b);
        let r = (sol[0] * sol[0] / 4.0 + sol[1] * sol[1] / 4.0 - sol[2]).sqrt();
        let ideal = 2.5 / 0.1f64.tan();
        assert!((ideal - 24.92).abs() < 0.01);
        assert!((r - ideal).abs() < 0.05, "fitted radius {r}");
    }

    fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
        for c in 0..3 {
            let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..3 {
                let f = a[r][c] / a[c][c];
                for k in c..3 {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = [0.0; 3];
        for r in (0..3).rev() {
            let s: f64 = (r + 1..3).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let s = VehicleState::moving(Vec2::ZERO, 0.0, 10.0);
        let p = CarParams::default();
        assert!(step_vehicle(&s, Action::new(f64::NAN, 0.0), &p, 0.1).is_err());
        assert!(step_vehicle(&s, Action::default(), &p, 0.0).is_err());
    }

    #[test]
    fn brake_and_zero_steer_properties() {
        let p = CarParams::default();
        let mut s = VehicleState::moving(Vec2::ZERO, 1.234, 40.0);
        for _ in 0..100 {
            let next = step_vehicle(&s, Action::new(0.0, -1.0), &p, 0.1).unwrap();
            assert!(next.speed <= s.speed);
            assert_eq!(next.heading, s.heading);
            s = next;
        }
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn ai_on_centerline_accelerates_straight() {
        let t = straight_track();
        let p = CarParams::default();
        let s = VehicleState::moving(Vec2::new(200.0, 0.0), 0.0, 10.0);
        let a = builtin_ai_action(&s, &t, &p, 0.9);
        assert!(a.steering.abs() < 1e-9);
        assert!(a.pedal > 0.0);
    }

    #[test]
    fn ai_corrects_left_offset_by_steering_right() {
        let t = straight_track();
        let p = CarParams::default();
        let s = VehicleState::moving(Vec2::new(200.0, 2.0), 0.0, 20.0);
        let a = builtin_ai_action(&s, &t, &p, 0.9);
        assert!(a.steering < 0.0);
    }

    #[test]
    fn ai_laps_oval_without_wall_contact() {
        let t = TrackGeometry::bundled("oval").unwrap();
        let p = CarParams::default();
        let mut s = VehicleState::moving(t.point_at(0.0), t.heading_at(0.0), 20.0);
        let mut progress = 0.0;
        let mut cp = 0.0;
        let mut steps = 0;
        while progress < 10.0 * t.total_length() {
            let a = builtin_ai_action(&s, &t, &p, 0.9);
            s = step_vehicle(&s, a, &p, 0.1).unwrap();
            let frame = t.centerline_projection(s.position);
            for c in s.footprint(&p).corners() {
                let f = t.centerline_projection(c);
                assert!(t.wall_distance(&f) >= 0.0, "wall contact at step {steps}");
            }
            progress += t.progress_delta(cp, frame.arc_length).unwrap();
            cp = frame.arc_length;
            steps += 1;
            assert!(steps < 20_000);
        }
    }
}

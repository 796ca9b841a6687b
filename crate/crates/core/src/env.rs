//! Multi-car racing episodes at a fixed 10 Hz control rate.
//!
//! Car 0 is the ego (learner); cars 1.. are opponents driven by the built-in
//! controller. Each step advances every car, detects contact, de-penetrates,
//! then computes the ego reward and observation.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Vec2;
use crate::reward::{reward, RewardInputs, RewardKind, RewardWeights};
use crate::sensing::{cast_lidar, raw_features, NormStats, Observation, RawFeatures};
use crate::track::TrackGeometry;
use crate::vehicle::{builtin_ai_action, builtin_target_speed, clamp_action, step_vehicle, Action, CarParams, VehicleState};
use crate::{Result, SimError};

pub const CONTROL_DT: f64 = 0.1;
pub const DEFAULT_EPISODE_STEPS: usize = 1000;
/// Ego speed retained after a car-to-car contact step.
pub const CAR_CONTACT_SPEED_FACTOR: f64 = 0.7;
const SEPARATION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpponentLayout {
    /// Opponent k (1-based) starts `k * initial_separation` ahead of the ego.
    #[default]
    ConsecutiveGaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    /// Separate overlapping cars and push cars back inside the walls.
    #[default]
    Resolve,
    /// Flag contacts but let bodies overlap (diagnostics only).
    FlagOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub track: String,
    pub n_opponents: usize,
    pub initial_separation: f64,
    pub layout: OpponentLayout,
    pub episode_steps: usize,
    pub dt: f64,
    pub reward: RewardKind,
    pub weights: RewardWeights,
    pub collisions: CollisionMode,
    pub car: CarParams,
    pub opponent_speed_scale: f64,
    /// Ego spawn speed as a fraction of top speed.
    pub spawn_speed_fraction: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            track: "oval".into(),
            n_opponents: 0,
            initial_separation: 200.0,
            layout: OpponentLayout::ConsecutiveGaps,
            episode_steps: DEFAULT_EPISODE_STEPS,
            dt: CONTROL_DT,
            reward: RewardKind::Racing,
            weights: RewardWeights::default(),
            collisions: CollisionMode::Resolve,
            car: CarParams::default(),
            opponent_speed_scale: 0.9,
            spawn_speed_fraction: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, track: &TrackGeometry) -> Result<()> {
        if self.episode_steps == 0 {
            return Err(SimError::config("episode_steps must be positive"));
        }
        if (self.dt - CONTROL_DT).abs() > 1e-12 {
            return Err(SimError::config(format!("control period is fixed at {CONTROL_DT} s, got {}", self.dt)));
        }
        if !(self.initial_separation >= 0.0 && self.initial_separation.is_finite()) {
            return Err(SimError::config("initial_separation must be >= 0"));
        }
        self.weights.validate()?;
        self.car.validate()?;
        if self.n_opponents > 0 {
            let span = self.n_opponents as f64 * self.initial_separation;
            if span >= track.total_length() {
                return Err(SimError::config(format!(
                    "{} opponents at {} m gaps span {span} m, track is only {:.1} m",
                    self.n_opponents,
                    self.initial_separation,
                    track.total_length()
                )));
            }
            let min_gap = self.car.body_length + 0.5;
            if self.initial_separation < min_gap
                || track.total_length() - span < min_gap
            {
                return Err(SimError::config(format!(
                    "opponent gaps must leave at least {min_gap} m between cars"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepInfo {
    pub step: usize,
    /// Course progress of every car, ego first.
    pub cp: Vec<f64>,
    /// Unwrapped progress: ego starts at 0, opponents at their spawn offsets.
    pub progress: Vec<f64>,
    pub lateral_offset: Vec<f64>,
    pub wall_flags: Vec<bool>,
    pub car_flags: Vec<bool>,
    /// Wrap-aware `cp(opponent) - cp(ego)` per opponent.
    pub delta_cp: Vec<f64>,
    /// Ego speed at contact time (before de-penetration).
    pub ego_impact_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub features: RawFeatures,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Per-car contact flags `(wall, car)`.
pub fn detect_collisions(cars: &[VehicleState], track: &TrackGeometry, params: &CarParams) -> Vec<(bool, bool)> {
    let rects: Vec<_> = cars.iter().map(|c| c.footprint(params)).collect();
    let mut flags: Vec<(bool, bool)> = rects.iter().map(|r| (touches_wall(r, track), false)).collect();
    for i in 0..rects.len() {
        for j in i + 1..rects.len() {
            if rects[i].overlap(&rects[j]).is_some() {
                flags[i].1 = true;
                flags[j].1 = true;
            }
        }
    }
    flags
}

fn touches_wall(rect: &crate::geom::OrientedRect, track: &TrackGeometry) -> bool {
    let center = track.centerline_projection(rect.center);
    if center.lateral_offset.abs() + rect.bounding_radius() < track.half_width() {
        return false;
    }
    rect.corners()
        .iter()
        .any(|&c| track.wall_distance(&track.centerline_projection(c)) < 0.0)
}

/// De-penetrates cars in contact. Overlapping pairs are pushed apart along the
/// minimum translation vector by equal amounts; the ego loses speed on car
/// contact; cars beyond a wall are moved back inside and lose the velocity
/// component pointing into the wall.
pub fn resolve_collision(
    cars: &mut [VehicleState],
    contacts: &[(bool, bool)],
    track: &TrackGeometry,
    params: &CarParams,
    ego: usize,
) {
    let mut slowed = false;
    for _ in 0..64 {
        let moved = separate_cars(cars, params);
        if !slowed && contacts.get(ego).is_some_and(|c| c.1) {
            let s = cars[ego].speed * CAR_CONTACT_SPEED_FACTOR;
            cars[ego].set_speed(s);
            slowed = true;
        }
        let mut pushed = false;
        for car in cars.iter_mut() {
            pushed |= resolve_wall(car, track, params);
        }
        if !moved && !pushed {
            break;
        }
    }
}

fn separate_cars(cars: &mut [VehicleState], params: &CarParams) -> bool {
    let mut any = false;
    for _ in 0..16 {
        let mut moved = false;
        for i in 0..cars.len() {
            for j in i + 1..cars.len() {
                let (ri, rj) = (cars[i].footprint(params), cars[j].footprint(params));
                if let Some((axis, depth)) = ri.overlap(&rj) {
                    let push = axis * (0.5 * (depth + SEPARATION_EPS));
                    cars[i].position -= push;
                    cars[j].position += push;
                    moved = true;
                }
            }
        }
        any |= moved;
        if !moved {
            break;
        }
    }
    any
}

fn resolve_wall(car: &mut VehicleState, track: &TrackGeometry, params: &CarParams) -> bool {
    let mut pushed = false;
    for _ in 0..8 {
        let rect = car.footprint(params);
        let worst = rect
            .corners()
            .iter()
            .map(|&c| track.centerline_projection(c))
            .map(|f| (f.lateral_offset.abs() - track.half_width(), f))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        let Some((excess, frame)) = worst else { return pushed };
        if excess < 0.0 {
            return pushed;
        }
        pushed = true;
        let outward = Vec2::from_angle(frame.tangent_heading).perp() * frame.lateral_offset.signum();
        car.position -= outward * (excess + SEPARATION_EPS);
        let v = car.velocity();
        let toward = v.dot(outward);
        if toward > 0.0 {
            let slide = v - outward * toward;
            let speed = slide.norm();
            if speed > 1e-9 {
                car.heading = slide.angle();
            }
            car.set_speed(speed);
        }
    }
    pushed
}

#[derive(Debug, Clone)]
pub struct RaceEnv {
    config: EnvConfig,
    track: Arc<TrackGeometry>,
    stats: Arc<NormStats>,
    cars: Vec<VehicleState>,
    cp: Vec<f64>,
    progress: Vec<f64>,
    step_idx: usize,
    done: bool,
    ready: bool,
}

impl RaceEnv {
    pub fn new(config: EnvConfig, track: Arc<TrackGeometry>) -> Result<Self> {
        config.validate(&track)?;
        Ok(RaceEnv {
            config,
            track,
            stats: Arc::new(NormStats::identity()),
            cars: Vec::new(),
            cp: Vec::new(),
            progress: Vec::new(),
            step_idx: 0,
            done: false,
            ready: false,
        })
    }

    /// Builds the environment, loading the configured track.
    pub fn from_config(config: EnvConfig) -> Result<Self> {
        let track = Arc::new(TrackGeometry::load(&config.track)?);
        RaceEnv::new(config, track)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn track(&self) -> &Arc<TrackGeometry> {
        &self.track
    }

    pub fn cars(&self) -> &[VehicleState] {
        &self.cars
    }

    /// Direct state access for scripted tests and harness hooks.
    pub fn cars_mut(&mut self) -> &mut [VehicleState] {
        &mut self.cars
    }

    pub fn step_index(&self) -> usize {
        self.step_idx
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Observations are normalized with these frozen statistics.
    pub fn set_stats(&mut self, stats: Arc<NormStats>) -> Result<()> {
        if !stats.is_frozen() {
            return Err(SimError::contract("environment needs frozen statistics"));
        }
        self.stats = stats;
        Ok(())
    }

    pub fn stats(&self) -> &Arc<NormStats> {
        &self.stats
    }

    /// Seeded reset: the ego spawns at a uniformly random arc length.
    pub fn reset(&mut self, seed: u64) -> Result<StepResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rng.random_range(0.0..self.track.total_length());
        self.reset_at(s)
    }

    /// Places the ego at `ego_arc` on the centerline and opponents ahead of it.
    pub fn reset_at(&mut self, ego_arc: f64) -> Result<StepResult> {
        let track = self.track.clone();
        let cfg = &self.config;
        let ego_arc = track.wrap_arc(ego_arc);
        let spawn = |s: f64, speed: f64| VehicleState::moving(track.point_at(s), track.heading_at(s), speed);
        let mut cars = vec![spawn(ego_arc, cfg.spawn_speed_fraction * cfg.car.top_speed)];
        let mut progress = vec![0.0];
        for k in 1..=cfg.n_opponents {
            let offset = match cfg.layout {
                OpponentLayout::ConsecutiveGaps => k as f64 * cfg.initial_separation,
            };
            let s = ego_arc + offset;
            let v = builtin_target_speed(&track, s, &cfg.car, cfg.opponent_speed_scale);
            cars.push(spawn(s, v));
            progress.push(offset);
        }
        self.cp = cars.iter().map(|c| track.centerline_projection(c.position).arc_length).collect();
        self.cars = cars;
        self.progress = progress;
        self.step_idx = 0;
        self.done = false;
        self.ready = true;
        let (observation, features) = self.observe()?;
        Ok(StepResult {
            observation,
            features,
            reward: 0.0,
            done: false,
            info: self.info(vec![false; self.cars.len()], vec![false; self.cars.len()], self.cars[0].speed),
        })
    }

    fn observe(&self) -> Result<(Observation, RawFeatures)> {
        let ego = &self.cars[0];
        let frame = self.track.centerline_projection(ego.position);
        let scan = cast_lidar(ego, &self.track, &self.cars[1..], &self.config.car);
        let features = raw_features(ego, &scan, &frame, &self.track);
        Ok((self.stats.normalize(&features)?, features))
    }

    fn info(&self, wall: Vec<bool>, car: Vec<bool>, impact_speed: f64) -> StepInfo {
        let lateral = self
            .cars
            .iter()
            .map(|c| self.track.centerline_projection(c.position).lateral_offset)
            .collect();
        StepInfo {
            step: self.step_idx,
            cp: self.cp.clone(),
            progress: self.progress.clone(),
            lateral_offset: lateral,
            wall_flags: wall,
            car_flags: car,
            delta_cp: self.cp[1..].iter().map(|&c| self.track.wrap_delta(c - self.cp[0])).collect(),
            ego_impact_speed: impact_speed,
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if !self.ready {
            return Err(SimError::contract("step called before reset"));
        }
        if self.done {
            return Err(SimError::contract("step called after the episode finished"));
        }
        let action = clamp_action(action.steering, action.pedal)?;
        let track = self.track.clone();
        let params = self.config.car;
        let dt = self.config.dt;

        let before: Vec<f64> = self.cars.iter().map(|c| c.speed).collect();
        let mut next = Vec::with_capacity(self.cars.len());
        next.push(step_vehicle(&self.cars[0], action, &params, dt)?);
        for opp in &self.cars[1..] {
            let a = builtin_ai_action(opp, &track, &params, self.config.opponent_speed_scale);
            next.push(step_vehicle(opp, a, &params, dt)?);
        }
        let impact_speed = next[0].speed;
        let contacts = detect_collisions(&next, &track, &params);
        if self.config.collisions == CollisionMode::Resolve {
            resolve_collision(&mut next, &contacts, &track, &params, 0);
        }
        for ((car, &(wall, hit)), &v0) in next.iter_mut().zip(&contacts).zip(&before) {
            car.wall_flag = wall;
            car.car_flag = hit;
            car.body_acceleration = [(car.speed - v0) / dt, 0.0, 0.0];
        }
        self.cars = next;

        let cp_prev = std::mem::take(&mut self.cp);
        self.cp = self.cars.iter().map(|c| track.centerline_projection(c.position).arc_length).collect();
        for ((p, &a), &b) in self.progress.iter_mut().zip(&cp_prev).zip(&self.cp) {
            *p += track.wrap_delta(b - a);
        }

        let inputs = RewardInputs {
            ego_cp_prev: cp_prev[0],
            ego_cp: self.cp[0],
            ego_velocity: [impact_speed, 0.0, 0.0],
            wall_contact: contacts[0].0,
            car_contact: contacts[0].1,
            opponents: cp_prev[1..].iter().copied().zip(self.cp[1..].iter().copied()).collect(),
        };
        let r = reward(self.config.reward, &inputs, &self.config.weights, &track);

        self.step_idx += 1;
        self.done = self.step_idx >= self.config.episode_steps;
        let (observation, features) = self.observe()?;
        let wall = contacts.iter().map(|c| c.0).collect();
        let car = contacts.iter().map(|c| c.1).collect();
        Ok(StepResult {
            observation,
            features,
            reward: r,
            done: self.done,
            info: self.info(wall, car, impact_speed),
        })
    }
}

/// Per-step CSV trace, one row per car.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub const HEADER: &'static str = "step,car_id,x,y,heading,speed,cp,lateral_offset,wall_flag,car_flag,reward";

    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(TraceWriter { out })
    }

    pub fn record(&mut self, env: &RaceEnv, result: &StepResult) -> Result<()> {
        let info = &result.info;
        for (id, car) in env.cars().iter().enumerate() {
            let reward = if id == 0 { result.reward } else { 0.0 };
            writeln!(
                self.out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                info.step,
                id,
                car.position.x,
                car.position.y,
                car.heading,
                car.speed,
                info.cp[id],
                info.lateral_offset[id],
                u8::from(info.wall_flags[id]),
                u8::from(info.car_flags[id]),
                reward
            )?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oval_env(n_opp: usize, sep: f64) -> RaceEnv {
        let cfg = EnvConfig {
            n_opponents: n_opp,
            initial_separation: sep,
            reward: if n_opp > 0 { RewardKind::Overtaking } else { RewardKind::Racing },
            ..Default::default()
        };
        RaceEnv::from_config(cfg).unwrap()
    }

    #[test]
    fn layouts() {
        let mut env = oval_env(5, 50.0);
        let r = env.reset(3).unwrap();
        let l = env.track().total_length();
        for k in 1..=5 {
            let d = env.track().wrap_delta(r.info.cp[k] - r.info.cp[0]);
            assert!((d - 50.0 * k as f64).abs() < 1e-6, "opponent {k} at {d}");
            assert_eq!(r.info.progress[k], 50.0 * k as f64);
        }
        assert!(r.info.delta_cp.iter().all(|d| d.abs() <= l / 2.0));

        let mut env = oval_env(1, 200.0);
        let r = env.reset(9).unwrap();
        assert!((r.info.delta_cp[0] - 200.0).abs() < 1e-6);

        let mut env = oval_env(0, 0.0);
        let r = env.reset(1).unwrap();
        assert_eq!(r.info.cp.len(), 1);
        assert!((env.cars()[0].speed - 27.5).abs() < 1e-12);
    }

    #[test]
    fn layout_too_long_is_config_error() {
        let cfg = EnvConfig { n_opponents: 6, initial_separation: 200.0, ..Default::default() };
        assert!(matches!(RaceEnv::from_config(cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let mut a = oval_env(1, 200.0);
        let mut b = oval_env(1, 200.0);
        assert_eq!(a.reset(42).unwrap(), b.reset(42).unwrap());
        assert_ne!(a.reset(43).unwrap().info.cp[0], b.reset(42).unwrap().info.cp[0]);
    }

    #[test]
    fn episode_length_and_step_after_done() {
        let mut env = oval_env(0, 0.0);
        assert!(env.step(Action::default()).is_err());
        env.reset(0).unwrap();
        let mut n = 0;
        loop {
            let r = env.step(Action::new(0.0, 0.2)).unwrap();
            n += 1;
            if r.done {
                break;
            }
        }
        assert_eq!(n, DEFAULT_EPISODE_STEPS);
        assert!(matches!(env.step(Action::default()), Err(SimError::Contract(_))));
    }

    #[test]
    fn stationary_car_earns_nothing() {
        let cfg = EnvConfig { spawn_speed_fraction: 0.0, ..Default::default() };
        let mut env = RaceEnv::from_config(cfg).unwrap();
        env.reset(5).unwrap();
        let mut total = 0.0;
        for _ in 0..1000 {
            let r = env.step(Action::default()).unwrap();
            assert!(!r.info.wall_flags[0] && !r.info.car_flags[0]);
            total += r.reward;
        }
        assert_eq!(total, 0.0);
    }

    #[test]
    fn wall_contact_sets_flags() {
        let mut env = oval_env(0, 0.0);
        env.reset_at(100.0).unwrap();
        // turn hard left on the straight until contact
        let mut seen = false;
        for _ in 0..40 {
            let r = env.step(Action::new(0.5, 1.0)).unwrap();
            if r.info.wall_flags[0] {
                assert_eq!(r.observation.0[crate::sensing::IDX_WALL_FLAG], 1.0);
                assert!(r.reward < r.info.cp[0]);
                seen = true;
                break;
            }
        }
        assert!(seen);
    }

    #[test]
    fn collision_detection_cases() {
        let t = TrackGeometry::bundled("oval").unwrap();
        let p = CarParams::default();
        let a = VehicleState::moving(t.point_at(100.0), 0.0, 10.0);
        let b = VehicleState::moving(t.point_at(110.0), 0.0, 10.0);
        assert_eq!(detect_collisions(&[a, b], &t, &p), vec![(false, false); 2]);
        assert_eq!(detect_collisions(&[a, a], &t, &p), vec![(false, true); 2]);
        // centered on the wall line: corners protrude
        let edge = VehicleState::moving(t.point_at(100.0) + Vec2::new(0.0, t.half_width()), 0.0, 10.0);
        assert!(detect_collisions(&[edge], &t, &p)[0].0);
    }

    #[test]
    fn resolution_cases() {
        let t = TrackGeometry::bundled("oval").unwrap();
        let p = CarParams::default();
        let a = VehicleState::moving(t.point_at(100.0), 0.0, 10.0);
        let b = VehicleState::moving(t.point_at(110.0), 0.0, 10.0);
        let mut cars = [a, b];
        resolve_collision(&mut cars, &[(false, false); 2], &t, &p, 0);
        assert_eq!(cars, [a, b]);

        let base = t.point_at(200.0);
        let left = VehicleState::moving(base + Vec2::new(0.0, 0.5), 0.0, 20.0);
        let right = VehicleState::moving(base - Vec2::new(0.0, 0.5), 0.0, 20.0);
        let mut cars = [left, right];
        let contacts = detect_collisions(&cars, &t, &p);
        resolve_collision(&mut cars, &contacts, &t, &p, 0);
        let dl = cars[0].position - left.position;
        let dr = cars[1].position - right.position;
        assert!((dl.y + dr.y).abs() < 1e-12 && dl.y > 0.0);
        assert!(dl.x.abs() < 1e-12 && dr.x.abs() < 1e-12);
        assert!(cars[0].footprint(&p).overlap(&cars[1].footprint(&p)).is_none());
        assert!((cars[0].speed - 14.0).abs() < 1e-12);
        assert_eq!(cars[1].speed, 20.0);
    }

    #[test]
    fn head_on_wall_is_pushed_back() {
        let t = TrackGeometry::bundled("oval").unwrap();
        let p = CarParams::default();
        // straight at y = 0 heading +x; the left wall is at y = +7
        let mut car = VehicleState::moving(Vec2::new(150.0, 7.5), std::f64::consts::FRAC_PI_2, 20.0);
        let contacts = detect_collisions(&[car], &t, &p);
        assert!(contacts[0].0);
        resolve_collision(std::slice::from_mut(&mut car), &contacts, &t, &p, 0);
        assert!(!detect_collisions(&[car], &t, &p)[0].0);
        assert!(car.speed < 20.0);
    }

    #[test]
    fn trace_rows() {
        let mut env = oval_env(2, 50.0);
        env.reset(1).unwrap();
        let mut w = TraceWriter::new(Vec::new()).unwrap();
        for _ in 0..5 {
            let r = env.step(Action::new(0.0, 1.0)).unwrap();
            w.record(&env, &r).unwrap();
        }
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], TraceWriter::<Vec<u8>>::HEADER);
        assert_eq!(lines.len(), 1 + 5 * 3);
        assert!(lines[1].starts_with("1,0,"));
    }
}

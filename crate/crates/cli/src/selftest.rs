//! Oracle suites that cross-check the hot kernels against slow, independently
//! written reference evaluators. Run by `overtake selftest` and the acceptance
//! harness.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::time::Instant;

use overtake_core::env::{EnvConfig, RaceEnv};
use overtake_core::geom::Vec2;
use overtake_core::reward::{overtaking_reward, racing_reward, RewardInputs, RewardKind, RewardWeights};
use overtake_core::sensing::{beam_angle, cast_lidar, LIDAR_BEAMS, LIDAR_RANGE};
use overtake_core::track::{TrackGeometry, BUNDLED_TRACKS};
use overtake_core::vehicle::{builtin_ai_action, CarParams, VehicleState};
use overtake_core::Result;
use overtake_learn::nn::{gradient_check, preactivation_margin, Mlp};
use overtake_learn::sac::{ReplayBuffer, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!("{} {} ({:.1}s): {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.seconds, self.detail)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome { name, passed, detail, seconds: t0.elapsed().as_secs_f64() }
}

/// Shortest signed loop difference, chosen by enumeration.
fn loop_diff(d: f64, l: f64) -> f64 {
    let mut best = d;
    for k in -2..=2 {
        let c = d + k as f64 * l;
        if c.abs() < best.abs() {
            best = c;
        }
    }
    best
}

/// Direct transcription of the racing and overtaking rewards.
fn reward_oracle(i: &RewardInputs, w: &RewardWeights, l: f64, overtaking: bool) -> f64 {
    let v2 = i.ego_velocity[0] * i.ego_velocity[0] + i.ego_velocity[1] * i.ego_velocity[1] + i.ego_velocity[2] * i.ego_velocity[2];
    let rho_w = if i.wall_contact { 1.0 } else { 0.0 };
    let rho_c = if i.car_contact { 1.0 } else { 0.0 };
    let mut r = loop_diff(i.ego_cp - i.ego_cp_prev, l) - w.c_w * rho_w * v2;
    if overtaking {
        r -= w.c_c * rho_c * v2;
        for &(prev, now) in &i.opponents {
            let d_prev = loop_diff(prev - i.ego_cp_prev, l);
            let d_now = loop_diff(now - i.ego_cp, l);
            let rho = if d_now.abs() < w.c_d { 1.0 } else { 0.0 };
            r += rho * w.c_r * (d_prev - d_now);
        }
    }
    r
}

/// Racing and overtaking rewards against the transcription on `n` random
/// inputs, with wrap-around and exact gate-boundary cases mixed in.
pub fn reward_kernels(n: usize, seed: u64) -> CheckOutcome {
    timed("reward kernels vs brute-force evaluator", || {
        let track = TrackGeometry::bundled("oval")?;
        let l = track.total_length();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let (mut wraps, mut boundaries) = (0, 0);
        for case in 0..n {
            let w = RewardWeights {
                c_w: rng.random_range(0.0..0.05),
                c_c: rng.random_range(0.0..0.05),
                c_r: rng.random_range(0.0..3.0),
                c_d: rng.random_range(1.0..60.0f64).round(),
            };
            let kind = case % 4;
            let (prev, now) = if kind == 1 {
                wraps += 1;
                (l - rng.random_range(0.0..3.0), rng.random_range(0.0..3.0))
            } else {
                let p = (rng.random_range(0.0..l - 140.0) * 4.0).round() / 4.0 + 70.0;
                (p, p + (rng.random_range(-2.0..6.0f64) * 4.0).round() / 4.0)
            };
            let mut opponents = Vec::new();
            for _ in 0..rng.random_range(0..6) {
                let o = if kind == 2 {
                    // exactly on the gate: |now - ego| == c_d
                    boundaries += 1;
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (now + side * (w.c_d + 0.5), now + side * w.c_d)
                } else {
                    let a = rng.random_range(0.0..l);
                    (a, track.wrap_arc(a + rng.random_range(-3.0..3.0)))
                };
                opponents.push(o);
            }
            let inputs = RewardInputs {
                ego_cp_prev: prev,
                ego_cp: now,
                ego_velocity: [rng.random_range(-60.0..60.0), rng.random_range(-5.0..5.0), 0.0],
                wall_contact: rng.random_bool(0.3),
                car_contact: rng.random_bool(0.3),
                opponents,
            };
            for (got, overtaking) in [(racing_reward(&inputs, &w, &track), false), (overtaking_reward(&inputs, &w, &track), true)] {
                let want = reward_oracle(&inputs, &w, l, overtaking);
                worst = worst.max((got - want).abs() / want.abs().max(1.0));
            }
        }
        Ok((worst <= 1e-9, format!("{n} inputs ({wraps} wrap-around, {boundaries} gate-boundary opponents), worst relative error {worst:.2e}")))
    })
}

/// Counts signed start/finish crossings in a sequence of course positions.
fn laps_crossed(cps: &[f64], l: f64) -> i64 {
    cps.windows(2)
        .map(|w| {
            if w[0] > 0.75 * l && w[1] < 0.25 * l {
                1
            } else if w[0] < 0.25 * l && w[1] > 0.75 * l {
                -1
            } else {
                0
            }
        })
        .sum()
}

/// Racing reward sums against net progress, and the gated relative-progress
/// sums against their window endpoints.
pub fn telescoping(rollouts: usize, seed: u64) -> CheckOutcome {
    timed("telescoping identities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_racing = 0.0f64;
        let mut worst_window = 0.0f64;
        let (mut windows, mut skipped) = (0usize, 0usize);
        let mut done = 0;
        while done < rollouts {
            let track_id = BUNDLED_TRACKS[rng.random_range(0..BUNDLED_TRACKS.len())];
            let steps = rng.random_range(200..1500);
            let scale = rng.random_range(0.5..1.0);
            let cfg = EnvConfig { track: track_id.into(), episode_steps: steps, ..Default::default() };
            let mut env = RaceEnv::from_config(cfg)?;
            let l = env.track().total_length();
            let first = env.reset(rng.random())?;
            let mut cps = vec![first.info.cp[0]];
            let mut total = 0.0;
            let mut contact = false;
            let mut last = first;
            while !last.done {
                let a = builtin_ai_action(&env.cars()[0], env.track(), &env.config().car, scale);
                last = env.step(a)?;
                contact |= last.info.wall_flags[0] || last.info.car_flags[0];
                total += last.reward;
                cps.push(last.info.cp[0]);
            }
            if contact {
                skipped += 1;
                continue;
            }
            let net = cps[cps.len() - 1] - cps[0] + laps_crossed(&cps, l) as f64 * l;
            worst_racing = worst_racing.max((total - net).abs());

            // one opponent close ahead; the ego is faster and passes it
            let w = RewardWeights { c_w: 0.0, c_c: 0.0, c_r: rng.random_range(0.5..2.0), c_d: rng.random_range(15.0..40.0) };
            let cfg = EnvConfig {
                track: track_id.into(),
                n_opponents: 1,
                initial_separation: rng.random_range(10.0..30.0),
                reward: RewardKind::Overtaking,
                weights: w,
                episode_steps: steps,
                ..Default::default()
            };
            let mut env = RaceEnv::from_config(cfg)?;
            let mut last = env.reset(rng.random())?;
            let mut delta = vec![last.info.delta_cp[0]];
            let mut term = vec![0.0];
            let mut gated = vec![false];
            let mut cp_prev = last.info.cp[0];
            while !last.done {
                let a = builtin_ai_action(&env.cars()[0], env.track(), &env.config().car, 1.3);
                last = env.step(a)?;
                let progress = loop_diff(last.info.cp[0] - cp_prev, l);
                cp_prev = last.info.cp[0];
                term.push(last.reward - progress);
                delta.push(last.info.delta_cp[0]);
                gated.push(last.info.delta_cp[0].abs() < w.c_d);
            }
            let mut t = 1;
            while t < gated.len() {
                if !gated[t] {
                    t += 1;
                    continue;
                }
                let start = t - 1;
                let mut sum = 0.0;
                while t < gated.len() && gated[t] {
                    sum += term[t];
                    t += 1;
                }
                let end = t - 1;
                windows += 1;
                worst_window = worst_window.max((sum - w.c_r * (delta[start] - delta[end])).abs());
            }
            done += 1;
        }
        let ok = worst_racing <= 1e-6 && worst_window <= 1e-6 && windows > 0;
        Ok((
            ok,
            format!(
                "{rollouts} rollouts ({skipped} redrawn after contact): racing residual {worst_racing:.2e} m, {windows} gated windows residual {worst_window:.2e}"
            ),
        ))
    })
}

/// Backward pass against central differences on a reduced network.
pub fn gradients(batches: usize, seed: u64) -> CheckOutcome {
    timed("backprop vs central differences", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut kinks = 0;
        for _ in 0..batches {
            let net = Mlp::<f64>::new(&[24, 48, 48, 4], &mut rng);
            let batch = 8;
            let x = loop {
                let x: Vec<f64> = (0..batch * 24).map(|_| rng.random_range(-1.0..1.0)).collect();
                if preactivation_margin(&net, &x, batch) > 1e-3 {
                    break x;
                }
            };
            let probe: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = gradient_check(&net, &x, batch, &probe, 1e-4);
            worst = worst.max(r.worst_relative_error);
            kinks += r.kink_crossings;
            checked += r.checked;
            if r.checked != net.n_params() {
                return Ok((false, format!("only {} of {} parameters checked", r.checked, net.n_params())));
            }
        }
        Ok((worst < 1e-4 && kinks == 0, format!("{batches} batches, {checked} parameters, worst relative error {worst:.2e}")))
    })
}

fn seg_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
    (a + ab * t - p).norm()
}

fn rect_corners(c: &VehicleState, params: &CarParams) -> [Vec2; 4] {
    let f = Vec2::from_angle(c.heading) * (0.5 * params.body_length);
    let s = Vec2::from_angle(c.heading + 0.5 * PI) * (0.5 * params.body_width);
    [c.position + f + s, c.position - f + s, c.position - f - s, c.position + f - s]
}

fn inside(p: Vec2, c: &VehicleState, params: &CarParams) -> bool {
    let d = p - c.position;
    let (ch, sh) = (c.heading.cos(), c.heading.sin());
    let along = d.x * ch + d.y * sh;
    let across = -d.x * sh + d.y * ch;
    along.abs() <= 0.5 * params.body_length && across.abs() <= 0.5 * params.body_width
}

const MARCH_STEP: f64 = 0.01;

/// Range along one beam by marching: steps by the distance to the nearest
/// surface but never less than 1 cm, and reports the first sample that lies
/// inside a car or whose step crossed a wall or car edge.
fn march(origin: Vec2, dir: Vec2, walls: &[(Vec2, Vec2)], cars: &[VehicleState], params: &CarParams) -> f64 {
    let mut edges = walls.to_vec();
    for c in cars {
        let k = rect_corners(c, params);
        edges.extend((0..4).map(|i| (k[i], k[(i + 1) % 4])));
    }
    let side = |p: Vec2, a: Vec2, b: Vec2| (b - a).cross(p - a);
    let mut t = 0.0;
    let mut prev = origin;
    while t < LIDAR_RANGE {
        let d = edges.iter().map(|&(a, b)| seg_distance(prev, a, b)).fold(f64::INFINITY, f64::min);
        t += d.max(MARCH_STEP);
        let p = origin + dir * t.min(LIDAR_RANGE);
        for &(a, b) in &edges {
            let (s0, s1) = (side(prev, a, b), side(p, a, b));
            if s0 * s1 <= 0.0 && s0 != s1 {
                // the step crosses the edge's line; the crossing must lie on the edge
                let x = prev + (p - prev) * (s0 / (s0 - s1));
                let ab = b - a;
                let u = (x - a).dot(ab) / ab.dot(ab);
                if (-1e-9..=1.0 + 1e-9).contains(&u) {
                    return t.min(LIDAR_RANGE);
                }
            }
        }
        if cars.iter().any(|c| inside(p, c, params)) {
            return t.min(LIDAR_RANGE);
        }
        prev = p;
    }
    LIDAR_RANGE
}

/// Analytic lidar against the marching reference on random scenes with up to
/// six other cars.
pub fn lidar(scenes: usize, seed: u64) -> CheckOutcome {
    timed("lidar vs 1 cm ray marching", || {
        let tracks: Vec<TrackGeometry> = BUNDLED_TRACKS.iter().map(|t| TrackGeometry::bundled(t)).collect::<Result<_>>()?;
        let params = CarParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut hits = 0usize;
        for _ in 0..scenes {
            let track = &tracks[rng.random_range(0..tracks.len())];
            let s = rng.random_range(0.0..track.total_length());
            let lat = rng.random_range(-(track.half_width() - 1.0)..track.half_width() - 1.0);
            let n = Vec2::from_angle(track.heading_at(s) + 0.5 * PI);
            let origin = track.point_at(s) + n * lat;
            let heading = track.heading_at(s) + rng.random_range(-0.6..0.6);
            let ego = VehicleState::moving(origin, heading, 20.0);
            let mut others = Vec::new();
            let n_cars = rng.random_range(0..=6);
            while others.len() < n_cars {
                let c = VehicleState::moving(
                    origin + Vec2::from_angle(rng.random_range(0.0..2.0 * PI)) * rng.random_range(3.0..20.0),
                    rng.random_range(0.0..2.0 * PI),
                    10.0,
                );
                let near_origin = rect_corners(&c, &params).iter().any(|k| k.distance(origin) < 0.5);
                if !inside(origin, &c, &params) && !near_origin {
                    others.push(c);
                }
            }
            let walls: Vec<(Vec2, Vec2)> = track
                .walls()
                .iter()
                .map(|w| (w.a, w.b))
                .filter(|&(a, b)| seg_distance(origin, a, b) <= LIDAR_RANGE + 0.1)
                .collect();
            let scan = cast_lidar(&ego, track, &others, &params);
            for j in 0..LIDAR_BEAMS {
                let want = march(origin, Vec2::from_angle(heading + beam_angle(j)), &walls, &others, &params);
                hits += (want < LIDAR_RANGE) as usize;
                worst = worst.max((scan.ranges[j] - want).abs());
            }
        }
        Ok((worst <= 0.02, format!("{scenes} scenes, {hits} beam hits, worst deviation {:.2} cm", worst * 100.0)))
    })
}

/// FIFO eviction against a queue model, then sampling frequencies.
pub fn replay_buffer(draws: usize, seed: u64) -> CheckOutcome {
    timed("replay FIFO and uniform sampling", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tr = |v: f32| Transition { obs: vec![v, -v], action: [v, 0.0], reward: v, next_obs: vec![v, v], done: false };
        for _ in 0..200 {
            let cap = rng.random_range(1..64);
            let mut buf = ReplayBuffer::new(2, cap);
            let mut model = VecDeque::new();
            for i in 0..rng.random_range(0..400) {
                buf.push(&tr(i as f32));
                model.push_back(i as f32);
                if model.len() > cap {
                    model.pop_front();
                }
            }
            if buf.len() != model.len() || (0..buf.len()).any(|k| buf.get(k).reward != model[k] || buf.get(k).obs != [model[k], -model[k]]) {
                return Ok((false, format!("FIFO order differs from the queue model at capacity {cap}")));
            }
        }
        let mut buf = ReplayBuffer::new(2, 10);
        for i in 0..25 {
            buf.push(&tr(i as f32));
        }
        let batch = buf.sample(draws, &mut rng)?;
        let mut counts = [0usize; 10];
        for r in &batch.rewards {
            counts[*r as usize - 15] += 1;
        }
        let worst = counts.iter().map(|&c| (c as f64 / draws as f64 - 0.1).abs()).fold(0.0, f64::max);
        Ok((worst <= 0.01, format!("200 FIFO sequences; {draws} draws over 10 slots, worst frequency deviation {worst:.4}")))
    })
}

/// The full quick suite.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![reward_kernels(100_000, 1), telescoping(100, 2), gradients(10, 3), lidar(1000, 4), replay_buffer(100_000, 5)]
}

use std::f64::consts::PI;
use std::sync::Arc;

use overtake_core::env::{detect_collisions, resolve_collision, EnvConfig, RaceEnv};
use overtake_core::geom::Vec2;
use overtake_core::reward::{overtaking_reward, racing_reward, relative_progress_term, RewardInputs, RewardKind, RewardWeights};
use overtake_core::track::TrackGeometry;
use overtake_core::vehicle::{Action, CarParams, VehicleState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oval() -> Arc<TrackGeometry> {
    Arc::new(TrackGeometry::bundled("oval").unwrap())
}

#[test]
fn full_throttle_reward_telescopes() {
    let track = oval();
    let mut env = RaceEnv::new(EnvConfig::default(), track.clone()).unwrap();
    // start of the bottom straight, heading +x
    let r0 = env.reset_at(0.0).unwrap();
    let mut total = 0.0;
    let mut cp = r0.info.cp[0];
    let mut gain = 0.0;
    for _ in 0..100 {
        let r = env.step(Action::new(0.0, 1.0)).unwrap();
        if r.info.wall_flags[0] {
            break;
        }
        gain += track.progress_delta(cp, r.info.cp[0]).unwrap();
        cp = r.info.cp[0];
        total += r.reward;
        // full throttle from the start line stays on the 300 m straight for a while
        if env.cars()[0].position.x > 290.0 {
            break;
        }
    }
    assert!(gain > 100.0);
    assert!((total - gain).abs() < 1e-9);
    assert!((env.cars()[0].speed - 27.5).abs() > 1.0);
}

#[test]
fn identical_seeds_and_actions_are_bit_identical() {
    let cfg = EnvConfig {
        n_opponents: 5,
        initial_separation: 50.0,
        reward: RewardKind::Overtaking,
        ..Default::default()
    };
    let run = || {
        let mut env = RaceEnv::new(cfg.clone(), oval()).unwrap();
        let mut out = vec![env.reset(77).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let a = Action::new(rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0));
            out.push(env.step(a).unwrap());
        }
        out
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.reward.to_bits(), y.reward.to_bits());
        assert_eq!(x.observation, y.observation);
        assert_eq!(x.info, y.info);
    }
}

#[test]
fn delta_cp_stays_within_half_lap() {
    let cfg = EnvConfig {
        n_opponents: 5,
        initial_separation: 200.0,
        reward: RewardKind::Overtaking,
        ..Default::default()
    };
    let track = oval();
    let mut env = RaceEnv::new(cfg, track.clone()).unwrap();
    env.reset(4).unwrap();
    for _ in 0..1000 {
        let r = env.step(Action::new(0.0, 1.0)).unwrap();
        assert_eq!(r.info.delta_cp.len(), 5);
        assert!(r.info.delta_cp.iter().all(|d| d.abs() <= track.total_length() / 2.0));
        assert_eq!(r.observation.0.len(), 96);
        assert!(r.observation.0.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn no_interpenetration_after_resolution() {
    let track = oval();
    let p = CarParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let l = track.total_length();
    for _ in 0..10_000 {
        let s = rng.random_range(0.0..l);
        let n = rng.random_range(2..4);
        let mut cars: Vec<VehicleState> = (0..n)
            .map(|_| {
                let ds = rng.random_range(-3.0..3.0);
                let lat = rng.random_range(-8.0..8.0);
                let at = s + ds;
                let pos = track.point_at(at) + Vec2::from_angle(track.heading_at(at)).perp() * lat;
                VehicleState::moving(pos, track.heading_at(at) + rng.random_range(-0.6..0.6), rng.random_range(0.0..50.0))
            })
            .collect();
        let contacts = detect_collisions(&cars, &track, &p);
        resolve_collision(&mut cars, &contacts, &track, &p, 0);
        let after = detect_collisions(&cars, &track, &p);
        for (i, c) in after.iter().enumerate() {
            assert!(!c.0 && !c.1, "car {i} still in contact: {c:?} {cars:?}");
        }
    }
}

fn ring_track() -> TrackGeometry {
    let r = 1000.0 / (2.0 * PI);
    let pts = (0..2000).map(|i| Vec2::from_angle(2.0 * PI * i as f64 / 2000.0) * r).collect();
    TrackGeometry::new(pts, 7.0).unwrap()
}

proptest! {
    #[test]
    fn gated_term_sign_follows_ground_gained(
        ego in 0.0f64..990.0,
        gap in -25.0f64..25.0,
        ego_step in 0.0f64..5.0,
        opp_step in 0.0f64..5.0,
    ) {
        let t = ring_track();
        let l = t.total_length();
        let w = RewardWeights::default();
        let opp = t.wrap_arc(ego + gap);
        let inp = RewardInputs {
            ego_cp_prev: ego,
            ego_cp: t.wrap_arc(ego + ego_step),
            ego_velocity: [20.0, 0.0, 0.0],
            opponents: vec![(opp, t.wrap_arc(opp + opp_step))],
            ..Default::default()
        };
        let term = relative_progress_term(&inp, &w, &t);
        let gained = ego_step - opp_step;
        let gap_now = t.wrap_delta(inp.opponents[0].1 - inp.ego_cp);
        if gap_now.abs() < w.c_d && gained.abs() > 1e-6 * l {
            prop_assert_eq!(term > 0.0, gained > 0.0);
        }
    }

    #[test]
    fn zero_opponents_is_racing_minus_car_penalty(
        prev in 0.0f64..999.0, step in -5.0f64..5.0, v in 0.0f64..55.0, wall: bool, car: bool,
    ) {
        let t = ring_track();
        let w = RewardWeights::default();
        let inp = RewardInputs {
            ego_cp_prev: prev,
            ego_cp: t.wrap_arc(prev + step),
            ego_velocity: [v, 0.0, 0.0],
            wall_contact: wall,
            car_contact: car,
            opponents: vec![],
        };
        let car_pen = if car { w.c_c * (v * v + 0.0 + 0.0) } else { 0.0 };
        let expect = racing_reward(&inp, &w, &t) - car_pen;
        prop_assert_eq!(overtaking_reward(&inp, &w, &t).to_bits(), (expect + 0.0).to_bits());
    }

    #[test]
    fn heavier_weights_never_raise_reward(v in 0.0f64..55.0, c1 in 0.0f64..0.05, extra in 0.0f64..0.05) {
        let t = ring_track();
        let inp = RewardInputs {
            ego_cp_prev: 10.0,
            ego_cp: 12.0,
            ego_velocity: [v, 0.0, 0.0],
            wall_contact: true,
            car_contact: true,
            opponents: vec![],
        };
        let lo = RewardWeights { c_w: c1, c_c: c1, ..Default::default() };
        let hi = RewardWeights { c_w: c1 + extra, c_c: c1 + extra, ..Default::default() };
        prop_assert!(overtaking_reward(&inp, &hi, &t) <= overtaking_reward(&inp, &lo, &t));
        prop_assert!(racing_reward(&inp, &hi, &t) <= racing_reward(&inp, &lo, &t));
    }
}

use std::time::Instant;

use overtake_core::env::{EnvConfig, RaceEnv};
use overtake_core::reward::RewardKind;
use overtake_core::vehicle::Action;

fn main() {
    for n in [0usize, 1, 5] {
        let cfg = EnvConfig {
            n_opponents: n,
            initial_separation: 50.0,
            reward: if n > 0 { RewardKind::Overtaking } else { RewardKind::Racing },
            ..Default::default()
        };
        let mut env = RaceEnv::from_config(cfg).unwrap();
        env.reset(1).unwrap();
        let t = Instant::now();
        let steps = 20_000;
        for i in 0..steps {
            if env.is_done() {
                env.reset(i as u64).unwrap();
            }
            env.step(Action::new(0.05, 0.5)).unwrap();
        }
        println!("{n} opponents: {:.1} us/step", t.elapsed().as_secs_f64() * 1e6 / steps as f64);
    }
}

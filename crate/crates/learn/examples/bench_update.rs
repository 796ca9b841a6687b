use std::time::Instant;

use overtake_learn::sac::{ReplayBuffer, SacAgent, SacConfig, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    for (dim, hidden, batch) in [(1, vec![64, 64], 128), (96, vec![256, 256], 256), (96, vec![256, 256], 64)] {
        let cfg = SacConfig { hidden: hidden.clone(), batch_size: batch, ..Default::default() };
        let mut agent = SacAgent::new(dim, cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut buf = ReplayBuffer::new(dim, 10_000);
        for _ in 0..5_000 {
            let o: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            buf.push(&Transition { obs: o.clone(), action: [0.1, 0.2], reward: 1.0, next_obs: o, done: false });
        }
        let n = 200;
        let t = Instant::now();
        for _ in 0..n {
            agent.update(&buf).unwrap();
        }
        println!("dim {dim} hidden {hidden:?} batch {batch}: {:.3} ms/update", t.elapsed().as_secs_f64() * 1e3 / n as f64);
    }
}

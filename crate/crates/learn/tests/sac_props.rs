use std::f64::consts::FRAC_PI_6;

use overtake_core::vehicle::Action;
use overtake_learn::sac::{
    log1m_tanh_sq, squashed_log_prob, ActionMode, ReplayBuffer, SacAgent, SacConfig, Transition, ACT_DIM,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tr(v: f32) -> Transition {
    Transition { obs: vec![v], action: [0.0; 2], reward: v, next_obs: vec![v], done: false }
}

proptest! {
    #[test]
    fn fifo_keeps_the_newest(cap in 1usize..40, n in 0usize..200) {
        let mut b = ReplayBuffer::new(1, cap);
        for i in 0..n {
            b.push(&tr(i as f32));
        }
        prop_assert_eq!(b.len(), n.min(cap));
        let got: Vec<f32> = (0..b.len()).map(|k| b.get(k).reward).collect();
        let want: Vec<f32> = (n.saturating_sub(cap)..n).map(|i| i as f32).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn sampling_is_uniform() {
    let mut b = ReplayBuffer::new(1, 10);
    for i in 0..10 {
        b.push(&tr(i as f32));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = b.sample(100_000, &mut rng).unwrap();
    let mut counts = [0usize; 10];
    for r in s.rewards {
        counts[r as usize] += 1;
    }
    for c in counts {
        let f = c as f64 / 1e5;
        assert!((f - 0.1).abs() <= 0.01, "{counts:?}");
    }
}

#[test]
fn log_prob_matches_sample_histogram() {
    let (mu, ls) = (0.3, -0.5f64);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bins = 40;
    let width = 2.0 / bins as f64;
    let n = 1_000_000;
    let mut hist = vec![0usize; bins];
    for _ in 0..n {
        let xi: f64 = rng.sample(StandardNormal);
        let a = (mu + ls.exp() * xi).tanh();
        hist[(((a + 1.0) / width) as usize).min(bins - 1)] += 1;
    }
    for (k, &c) in hist.iter().enumerate() {
        let empirical = c as f64 / (n as f64 * width);
        // bin-averaged density by midpoint quadrature
        let lo = -1.0 + k as f64 * width;
        let m = 200;
        let model: f64 = (0..m)
            .map(|i| squashed_log_prob(&[mu], &[ls], &[lo + (i as f64 + 0.5) * width / m as f64]).exp())
            .sum::<f64>()
            / m as f64;
        if c >= 5_000 {
            assert!((empirical - model).abs() <= 0.05 * model, "bin {k}: {empirical} vs {model}");
        }
    }
}

#[test]
fn log_prob_integrates_to_one() {
    for (mu, ls) in [(0.0, -0.5), (0.8, -1.0), (-1.2, 0.3)] {
        // substitute a = tanh(u) to keep the integrand smooth near the ends
        let m = 200_000;
        let (lo, hi) = (-12.0f64, 12.0f64);
        let h = (hi - lo) / m as f64;
        let total: f64 = (0..m)
            .map(|i| {
                let u: f64 = lo + (i as f64 + 0.5) * h;
                let a = u.tanh();
                squashed_log_prob(&[mu], &[ls], &[a]).exp() * (1.0 - a * a)
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }
}

#[test]
fn head_gradient_formulas_match_differences() {
    // logp(mu, ls) with the noise held fixed, per dimension
    let f = |mu: f64, ls: f64, xi: f64| {
        let u = mu + ls.exp() * xi;
        -0.5 * xi * xi - ls - log1m_tanh_sq(u)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let (mu, ls, xi): (f64, f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-3.0..1.0), rng.random_range(-2.5..2.5));
        let a = (mu + ls.exp() * xi).tanh();
        let h = 1e-6;
        let d_mu = (f(mu + h, ls, xi) - f(mu - h, ls, xi)) / (2.0 * h);
        let d_ls = (f(mu, ls + h, xi) - f(mu, ls - h, xi)) / (2.0 * h);
        assert!((d_mu - 2.0 * a).abs() < 1e-6);
        assert!((d_ls - (-1.0 + 2.0 * a * ls.exp() * xi)).abs() < 1e-6);
    }
}

#[test]
fn scaled_actions_stay_in_bounds() {
    let mut agent = SacAgent::new(96, SacConfig::default(), 3).unwrap();
    // make the head saturate often
    agent.policy.layers.last_mut().unwrap().w.iter_mut().for_each(|w| *w *= 50.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let obs: Vec<f32> = (0..1000 * 96).map(|_| rng.random_range(-5.0..5.0)).collect();
        for mode in [ActionMode::Stochastic, ActionMode::Deterministic] {
            for a in agent.sample_actions(&obs, 1000, mode) {
                let act = Action::from_unit(a);
                assert!(act.steering.abs() <= FRAC_PI_6 && act.pedal.abs() <= 1.0);
            }
        }
    }
}

#[test]
fn stochastic_mean_approaches_deterministic_action() {
    let mut agent = SacAgent::new(4, SacConfig { hidden: vec![16, 16], ..Default::default() }, 6).unwrap();
    let obs = [0.5f32, -0.2, 1.0, 0.3];
    // a narrow head keeps the squashing bias far below the sampling error
    agent.policy.layers.last_mut().unwrap().b[ACT_DIM..].iter_mut().for_each(|b| *b = -4.0);
    let det = agent.sample_actions(&obs, 1, ActionMode::Deterministic)[0];
    let rows: Vec<f32> = obs.iter().copied().cycle().take(4 * 10_000).collect();
    let samples = agent.sample_actions(&rows, 10_000, ActionMode::Stochastic);
    for j in 0..ACT_DIM {
        let mean = samples.iter().map(|a| a[j]).sum::<f64>() / 1e4;
        let var = samples.iter().map(|a| (a[j] - mean).powi(2)).sum::<f64>() / 1e4;
        assert!((mean - det[j]).abs() <= 3.0 * var.sqrt() / 100.0, "dim {j}: {mean} vs {}", det[j]);
    }
}

#[test]
fn critic_learns_constant_value() {
    let cfg = SacConfig { hidden: vec![64, 64], gamma: 0.0, batch_size: 128, ..Default::default() };
    let mut agent = SacAgent::new(4, cfg, 7).unwrap();
    let mut buf = ReplayBuffer::new(4, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5_000 {
        let o: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        buf.push(&Transition { obs: o, action: a, reward: 1.0, next_obs: n, done: false });
    }
    for _ in 0..2_000 {
        agent.update(&buf).unwrap();
    }
    let probe = buf.sample(500, &mut rng).unwrap();
    let mut x = Vec::new();
    for r in 0..500 {
        x.extend_from_slice(&probe.obs[r * 4..r * 4 + 4]);
        x.extend_from_slice(&probe.actions[r * 2..r * 2 + 2]);
    }
    for q in [&agent.q1, &agent.q2] {
        for v in q.predict(&x, 500) {
            assert!((v - 1.0).abs() <= 0.05, "{v}");
        }
    }
}

/// One-dimensional reach task: state is the position error, the first action
/// component moves the point, reward is the negative squared error.
struct Reach {
    x: f64,
    t: usize,
}

const REACH_STEPS: usize = 50;

impl Reach {
    fn reset(rng: &mut ChaCha8Rng) -> Reach {
        Reach { x: rng.random_range(-3.0..3.0), t: 0 }
    }

    fn step(&mut self, a: [f64; 2]) -> (f64, bool) {
        self.x = (self.x + 0.5 * a[0]).clamp(-5.0, 5.0);
        self.t += 1;
        (-self.x * self.x, self.t == REACH_STEPS)
    }
}

fn reach_return(agent: &mut SacAgent, episodes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut env = Reach::reset(&mut rng);
        loop {
            let a = agent.sample_actions(&[env.x as f32], 1, ActionMode::Deterministic)[0];
            let (r, end) = env.step(a);
            total += r;
            if end {
                break;
            }
        }
    }
    total / episodes as f64
}

/// Trains on the reach task; returns the agent and per-update entropies.
fn train_reach(seed: u64, steps: usize, update_every: usize) -> (SacAgent, f64, Vec<f64>) {
    let cfg = SacConfig { hidden: vec![64, 64], gamma: 0.9, batch_size: 128, ..Default::default() };
    let mut agent = SacAgent::new(1, cfg, seed).unwrap();
    let untrained = reach_return(&mut agent, 20, 1000 + seed);
    let mut buf = ReplayBuffer::new(1, 1_000_000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Reach::reset(&mut rng);
    let mut entropies = Vec::new();
    for step in 0..steps {
        let obs = [env.x as f32];
        let a = if step < 1_000 {
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        } else {
            agent.sample_actions(&obs, 1, ActionMode::Stochastic)[0]
        };
        let (r, end) = env.step(a);
        buf.push(&Transition {
            obs: obs.to_vec(),
            action: [a[0] as f32, a[1] as f32],
            reward: r as f32,
            next_obs: vec![env.x as f32],
            done: false,
        });
        if end {
            env = Reach::reset(&mut rng);
        }
        if buf.len() >= 1_000 && step % update_every == 0 {
            entropies.push(agent.update(&buf).unwrap().entropy);
        }
    }
    (agent, untrained, entropies)
}

#[test]
fn reach_task_improves_fivefold() {
    for seed in 0..3 {
        let (mut agent, untrained, _) = train_reach(seed, 30_000, 1);
        let trained = reach_return(&mut agent, 20, 1000 + seed);
        assert!(trained * 5.0 >= untrained, "seed {seed}: untrained {untrained}, trained {trained}");
        assert!(agent.is_finite());
    }
}

#[test]
fn entropy_settles_near_target() {
    let (agent, _, ent) = train_reach(11, 100_000, 2);
    let tail = &ent[ent.len() * 3 / 4..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!((mean + 2.0).abs() <= 0.5, "tail entropy {mean}, alpha {}", agent.alpha());
}

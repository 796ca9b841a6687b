//! Soft actor-critic with a tanh-squashed Gaussian policy, twin critics with
//! Polyak-averaged targets, and automatic entropy temperature.
//!
//! Actions live in `[-1, 1]^2` inside the learner; the environment scales
//! steering by the steering limit.

use std::io::{Read, Write};

use overtake_core::{Result, SimError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{read_u32, Adam, AdamConfig, Mlp};

pub const ACT_DIM: usize = 2;
const LN_2PI: f64 = 1.837_877_066_409_345_3;
const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub target_entropy: f64,
    pub init_alpha: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Bias of the freshly initialized log-std head.
    pub init_log_std: f64,
    pub buffer_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![256, 256],
            gamma: 0.99,
            tau: 0.005,
            batch_size: 4096,
            lr: 1e-3,
            target_entropy: -(ACT_DIM as f64),
            init_alpha: 1.0,
            log_std_min: -20.0,
            log_std_max: 2.0,
            init_log_std: -0.5,
            buffer_capacity: 1_000_000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) && self.gamma != 0.0 {
            return Err(SimError::config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(SimError::config("tau must be in [0, 1]"));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.hidden.is_empty() {
            return Err(SimError::config("batch size, buffer capacity and hidden layers must be nonzero"));
        }
        if !(self.init_alpha > 0.0 && self.lr > 0.0) || self.log_std_min >= self.log_std_max {
            return Err(SimError::config("invalid learner hyperparameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    /// Normalized action in `[-1, 1]^2`.
    pub action: [f32; ACT_DIM],
    pub reward: f32,
    pub next_obs: Vec<f32>,
    /// True only for genuine terminal states, never for time limits.
    pub done: bool,
}

/// Column-wise minibatch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub obs: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub next_obs: Vec<f32>,
    pub dones: Vec<f32>,
}

/// Fixed-capacity FIFO ring. Storage grows lazily up to capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    obs_dim: usize,
    capacity: usize,
    cursor: usize,
    len: usize,
    obs: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    next_obs: Vec<f32>,
    dones: Vec<f32>,
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            obs_dim,
            capacity,
            cursor: 0,
            len: 0,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_obs: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn push(&mut self, t: &Transition) {
        assert_eq!(t.obs.len(), self.obs_dim, "observation width mismatch");
        assert_eq!(t.next_obs.len(), self.obs_dim, "observation width mismatch");
        let d = self.obs_dim;
        if self.len < self.capacity {
            self.obs.extend_from_slice(&t.obs);
            self.next_obs.extend_from_slice(&t.next_obs);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.dones.push(f32::from(u8::from(t.done)));
            self.len += 1;
        } else {
            let i = self.cursor;
            self.obs[i * d..(i + 1) * d].copy_from_slice(&t.obs);
            self.next_obs[i * d..(i + 1) * d].copy_from_slice(&t.next_obs);
            self.actions[i * ACT_DIM..(i + 1) * ACT_DIM].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.dones[i] = f32::from(u8::from(t.done));
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// The `k`-th oldest stored transition.
    pub fn get(&self, k: usize) -> Transition {
        assert!(k < self.len, "index out of range");
        let i = if self.len < self.capacity { k } else { (self.cursor + k) % self.capacity };
        self.slot(i)
    }

    fn slot(&self, i: usize) -> Transition {
        let d = self.obs_dim;
        Transition {
            obs: self.obs[i * d..(i + 1) * d].to_vec(),
            action: [self.actions[i * ACT_DIM], self.actions[i * ACT_DIM + 1]],
            reward: self.rewards[i],
            next_obs: self.next_obs[i * d..(i + 1) * d].to_vec(),
            done: self.dones[i] != 0.0,
        }
    }

    /// Uniform sampling with replacement. The draw order is fixed by `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.len == 0 {
            return Err(SimError::contract("cannot sample an empty replay buffer"));
        }
        let d = self.obs_dim;
        let mut b = Batch {
            len: n,
            obs: Vec::with_capacity(n * d),
            actions: Vec::with_capacity(n * ACT_DIM),
            rewards: Vec::with_capacity(n),
            next_obs: Vec::with_capacity(n * d),
            dones: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let i = rng.random_range(0..self.len);
            b.obs.extend_from_slice(&self.obs[i * d..(i + 1) * d]);
            b.next_obs.extend_from_slice(&self.next_obs[i * d..(i + 1) * d]);
            b.actions.extend_from_slice(&self.actions[i * ACT_DIM..(i + 1) * ACT_DIM]);
            b.rewards.push(self.rewards[i]);
            b.dones.push(self.dones[i]);
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

/// Mean and clamped log-std rows produced by the policy head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Splits raw `[mu0, mu1, ls0, ls1]` rows.
pub fn split_head(raw: &[f32], lo: f64, hi: f64) -> PolicyOutput {
    let n = raw.len() / (2 * ACT_DIM);
    let mut out = PolicyOutput { mean: Vec::with_capacity(n * ACT_DIM), log_std: Vec::with_capacity(n * ACT_DIM) };
    for row in raw.chunks_exact(2 * ACT_DIM) {
        out.mean.extend(row[..ACT_DIM].iter().map(|&v| v as f64));
        out.log_std.extend(row[ACT_DIM..].iter().map(|&v| (v as f64).clamp(lo, hi)));
    }
    out
}

/// `log(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Log-density of a squashed action `a = tanh(u)`, `u ~ N(mean, exp(log_std)^2)`,
/// per dimension and summed.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| {
            let a = a.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
            let u = a.atanh();
            let z = (u - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI - log1m_tanh_sq(u)
        })
        .sum()
}

/// Acts from a bare policy network, as sampling workers do.
pub fn act_with(policy: &Mlp<f32>, cfg: &SacConfig, obs: &[f32], n: usize, mode: ActionMode, rng: &mut impl Rng) -> Vec<[f64; ACT_DIM]> {
    let head = split_head(&policy.predict(obs, n), cfg.log_std_min, cfg.log_std_max);
    (0..n)
        .map(|r| {
            let mut a = [0.0; ACT_DIM];
            for (j, aj) in a.iter_mut().enumerate() {
                let k = r * ACT_DIM + j;
                let u = match mode {
                    ActionMode::Deterministic => head.mean[k],
                    ActionMode::Stochastic => {
                        let xi: f64 = rng.sample(StandardNormal);
                        head.mean[k] + head.log_std[k].exp() * xi
                    }
                };
                *aj = u.tanh();
            }
            a
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacAgent {
    pub config: SacConfig,
    pub obs_dim: usize,
    pub policy: Mlp<f32>,
    pub q1: Mlp<f32>,
    pub q2: Mlp<f32>,
    pub q1_target: Mlp<f32>,
    pub q2_target: Mlp<f32>,
    pub log_alpha: f64,
    pub policy_opt: Adam<f32>,
    pub q1_opt: Adam<f32>,
    pub q2_opt: Adam<f32>,
    pub alpha_opt: Adam<f64>,
    pub updates: u64,
    rng: ChaCha8Rng,
}

impl SacAgent {
    pub fn new(obs_dim: usize, config: SacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden);
        let mut psizes = sizes.clone();
        psizes.push(2 * ACT_DIM);
        let mut qsizes = sizes;
        qsizes[0] += ACT_DIM;
        qsizes.push(1);
        let mut policy = Mlp::new(&psizes, &mut rng);
        init_log_std_head(&mut policy, config.init_log_std);
        let q1 = Mlp::new(&qsizes, &mut rng);
        let q2 = Mlp::new(&qsizes, &mut rng);
        let adam = AdamConfig { lr: config.lr, ..Default::default() };
        Ok(SacAgent {
            obs_dim,
            policy_opt: Adam::for_net(&policy, adam),
            q1_opt: Adam::for_net(&q1, adam),
            q2_opt: Adam::for_net(&q2, adam),
            alpha_opt: Adam::new(&[1], adam),
            log_alpha: config.init_alpha.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            config,
            updates: 0,
            rng,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn policy_output(&self, obs: &[f32], n: usize) -> PolicyOutput {
        split_head(&self.policy.predict(obs, n), self.config.log_std_min, self.config.log_std_max)
    }

    /// Normalized actions in `[-1, 1]^2` for `n` observation rows.
    pub fn sample_actions(&mut self, obs: &[f32], n: usize, mode: ActionMode) -> Vec<[f64; ACT_DIM]> {
        act_with(&self.policy, &self.config, obs, n, mode, &mut self.rng)
    }

    pub fn log_prob(&self, obs: &[f32], action: [f64; ACT_DIM]) -> Result<f64> {
        if action.iter().any(|a| !(a.abs() < 1.0)) {
            return Err(SimError::contract("log_prob needs an action strictly inside (-1, 1)"));
        }
        let head = self.policy_output(obs, 1);
        Ok(squashed_log_prob(&head.mean, &head.log_std, &action))
    }

    /// Reinitializes the exploration parameters: the log-std output head
    /// (zero weights, constant bias), its optimizer moments, and the
    /// temperature with its optimizer.
    pub fn reset_exploration(&mut self) {
        init_log_std_head(&mut self.policy, self.config.init_log_std);
        let last = self.policy.layers.len() - 1;
        let n_in = self.policy.layers[last].n_in;
        let cols = ACT_DIM..2 * ACT_DIM;
        let w_entries: Vec<usize> = (0..n_in).flat_map(|i| cols.clone().map(move |j| i * 2 * ACT_DIM + j)).collect();
        self.policy_opt.reset_entries(2 * last, w_entries);
        self.policy_opt.reset_entries(2 * last + 1, cols);
        self.log_alpha = self.config.init_alpha.ln();
        self.alpha_opt = Adam::new(&[1], self.alpha_opt.config);
    }

    /// One gradient step each for both critics, the policy, and the temperature,
    /// followed by the target soft update.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<UpdateStats> {
        let n = self.config.batch_size;
        if buffer.len() < n {
            return Err(SimError::contract(format!("replay holds {} transitions, batch needs {n}", buffer.len())));
        }
        if buffer.obs_dim() != self.obs_dim {
            return Err(SimError::contract("replay observation width differs from the agent's"));
        }
        let batch = buffer.sample(n, &mut self.rng)?;
        self.update_on(&batch)
    }

    pub fn update_on(&mut self, b: &Batch) -> Result<UpdateStats> {
        let n = b.len;
        let d = self.obs_dim;
        let alpha = self.alpha();
        let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);

        // critic targets from freshly sampled next actions
        let next_head = split_head(&self.policy.predict(&b.next_obs, n), lo, hi);
        let mut next_in = Vec::with_capacity(n * (d + ACT_DIM));
        let mut next_logp = vec![0.0; n];
        for r in 0..n {
            next_in.extend_from_slice(&b.next_obs[r * d..(r + 1) * d]);
            for j in 0..ACT_DIM {
                let k = r * ACT_DIM + j;
                let xi: f64 = self.rng.sample(StandardNormal);
                let u = next_head.mean[k] + next_head.log_std[k].exp() * xi;
                next_logp[r] += -0.5 * xi * xi - next_head.log_std[k] - 0.5 * LN_2PI - log1m_tanh_sq(u);
                next_in.push(u.tanh() as f32);
            }
        }
        let t1 = self.q1_target.predict(&next_in, n);
        let t2 = self.q2_target.predict(&next_in, n);
        let gamma = self.config.gamma;
        let y: Vec<f64> = (0..n)
            .map(|r| {
                let soft = (t1[r].min(t2[r]) as f64) - alpha * next_logp[r];
                b.rewards[r] as f64 + gamma * (1.0 - b.dones[r] as f64) * soft
            })
            .collect();

        let mut q_in = Vec::with_capacity(n * (d + ACT_DIM));
        for r in 0..n {
            q_in.extend_from_slice(&b.obs[r * d..(r + 1) * d]);
            q_in.extend_from_slice(&b.actions[r * ACT_DIM..(r + 1) * ACT_DIM]);
        }
        let q1_loss = critic_step(&mut self.q1, &mut self.q1_opt, &q_in, &y, n);
        let q2_loss = critic_step(&mut self.q2, &mut self.q2_opt, &q_in, &y, n);

        // policy: reparameterized actions through the updated critics
        let pcache = self.policy.forward(&b.obs, n);
        let raw = pcache.output();
        let mut xi = vec![0.0; n * ACT_DIM];
        let mut u = vec![0.0; n * ACT_DIM];
        let mut a = vec![0.0; n * ACT_DIM];
        let mut logp = vec![0.0; n];
        let mut pi_in = Vec::with_capacity(n * (d + ACT_DIM));
        for r in 0..n {
            pi_in.extend_from_slice(&b.obs[r * d..(r + 1) * d]);
            for j in 0..ACT_DIM {
                let k = r * ACT_DIM + j;
                let mu = raw[r * 2 * ACT_DIM + j] as f64;
                let ls = (raw[r * 2 * ACT_DIM + ACT_DIM + j] as f64).clamp(lo, hi);
                xi[k] = self.rng.sample(StandardNormal);
                u[k] = mu + ls.exp() * xi[k];
                a[k] = u[k].tanh();
                logp[r] += -0.5 * xi[k] * xi[k] - ls - 0.5 * LN_2PI - log1m_tanh_sq(u[k]);
                pi_in.push(a[k] as f32);
            }
        }
        let c1 = self.q1.forward(&pi_in, n);
        let c2 = self.q2.forward(&pi_in, n);
        let inv_n = 1.0 / n as f64;
        let mut g1 = vec![0.0f32; n];
        let mut g2 = vec![0.0f32; n];
        let mut policy_loss = 0.0;
        for r in 0..n {
            let (v1, v2) = (c1.output()[r], c2.output()[r]);
            if v1 <= v2 {
                g1[r] = -inv_n as f32;
            } else {
                g2[r] = -inv_n as f32;
            }
            policy_loss += (alpha * logp[r] - v1.min(v2) as f64) * inv_n;
        }
        let (_, dq1) = self.q1.backward(&c1, &g1, false);
        let (_, dq2) = self.q2.backward(&c2, &g2, false);
        let w = d + ACT_DIM;
        let mut head_grad = vec![0.0f32; n * 2 * ACT_DIM];
        for r in 0..n {
            for j in 0..ACT_DIM {
                let k = r * ACT_DIM + j;
                let dl_da = (dq1[r * w + d + j] + dq2[r * w + d + j]) as f64;
                let dl_du_q = dl_da * (1.0 - a[k] * a[k]);
                let ls_raw = raw[r * 2 * ACT_DIM + ACT_DIM + j] as f64;
                let sigma = ls_raw.clamp(lo, hi).exp();
                // d logp / du = 2a with the noise held fixed
                let g_mu = alpha * inv_n * 2.0 * a[k] + dl_du_q;
                let g_ls = if ls_raw < lo || ls_raw > hi {
                    0.0
                } else {
                    alpha * inv_n * (-1.0 + 2.0 * a[k] * sigma * xi[k]) + dl_du_q * sigma * xi[k]
                };
                head_grad[r * 2 * ACT_DIM + j] = g_mu as f32;
                head_grad[r * 2 * ACT_DIM + ACT_DIM + j] = g_ls as f32;
            }
        }
        let (pg, _) = self.policy.backward(&pcache, &head_grad, true);
        let pg = pg.expect("parameter gradients requested");
        self.policy_opt.step(self.policy.tensors_mut(), pg.tensors());

        // temperature: push entropy toward the target
        let entropy = -logp.iter().sum::<f64>() * inv_n;
        let g_alpha = entropy - self.config.target_entropy;
        let mut la = [self.log_alpha];
        self.alpha_opt.step(vec![&mut la], vec![&[g_alpha]]);
        self.log_alpha = la[0];

        self.q1_target.soft_update(&self.q1, self.config.tau);
        self.q2_target.soft_update(&self.q2, self.config.tau);
        self.updates += 1;
        Ok(UpdateStats { q1_loss, q2_loss, policy_loss, alpha: self.alpha(), entropy })
    }

    pub fn is_finite(&self) -> bool {
        [&self.policy, &self.q1, &self.q2, &self.q1_target, &self.q2_target]
            .iter()
            .all(|n| n.is_finite())
            && self.log_alpha.is_finite()
    }

    /// Networks, optimizer state and temperature.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.obs_dim as u32).to_le_bytes())?;
        for net in [&self.policy, &self.q1, &self.q2, &self.q1_target, &self.q2_target] {
            net.write_to(w)?;
        }
        for opt in [&self.policy_opt, &self.q1_opt, &self.q2_opt] {
            opt.write_to(w)?;
        }
        self.alpha_opt.write_to(w)?;
        w.write_all(&self.log_alpha.to_le_bytes())?;
        w.write_all(&self.updates.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, config: SacConfig, seed: u64) -> Result<Self> {
        let obs_dim = read_u32(r)? as usize;
        let mut agent = SacAgent::new(obs_dim, config, seed)?;
        let adam = agent.policy_opt.config;
        let mut nets = Vec::with_capacity(5);
        for _ in 0..5 {
            nets.push(Mlp::read_from(r)?);
        }
        let want = [agent.policy.sizes(), agent.q1.sizes()];
        if nets[0].sizes() != want[0] || nets[1..].iter().any(|n| n.sizes() != want[1]) {
            return Err(SimError::config(format!(
                "checkpoint layer sizes {:?} do not match the configured {:?}",
                nets.iter().map(|n| n.sizes()).collect::<Vec<_>>(),
                want
            )));
        }
        let [policy, q1, q2, q1_target, q2_target]: [Mlp<f32>; 5] = nets.try_into().expect("five networks were read");
        (agent.policy, agent.q1, agent.q2, agent.q1_target, agent.q2_target) = (policy, q1, q2, q1_target, q2_target);
        agent.policy_opt = Adam::read_from(r, adam)?;
        agent.q1_opt = Adam::read_from(r, adam)?;
        agent.q2_opt = Adam::read_from(r, adam)?;
        agent.alpha_opt = Adam::read_from(r, adam)?;
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        agent.log_alpha = f64::from_le_bytes(b);
        r.read_exact(&mut b)?;
        agent.updates = u64::from_le_bytes(b);
        Ok(agent)
    }
}

fn init_log_std_head(policy: &mut Mlp<f32>, bias: f64) {
    let last = policy.layers.last_mut().expect("policy has layers");
    for i in 0..last.n_in {
        for j in ACT_DIM..2 * ACT_DIM {
            last.w[i * 2 * ACT_DIM + j] = 0.0;
        }
    }
    for j in ACT_DIM..2 * ACT_DIM {
        last.b[j] = bias as f32;
    }
}

/// One MSE regression step toward `y`; returns the pre-step loss.
fn critic_step(q: &mut Mlp<f32>, opt: &mut Adam<f32>, x: &[f32], y: &[f64], n: usize) -> f64 {
    let cache = q.forward(x, n);
    let mut loss = 0.0;
    let grad: Vec<f32> = cache
        .output()
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let e = p as f64 - t;
            loss += e * e / n as f64;
            (2.0 * e / n as f64) as f32
        })
        .collect();
    let (g, _) = q.backward(&cache, &grad, true);
    let g = g.expect("parameter gradients requested");
    opt.step(q.tensors_mut(), g.tensors());
    loss
}

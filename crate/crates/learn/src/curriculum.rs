//! Staged training: manifests, the learner state carried across stages, the
//! stage-transition surgery, and synchronized parallel experience collection.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use overtake_core::env::{EnvConfig, RaceEnv, StepResult};
use overtake_core::reward::RewardKind;
use overtake_core::sensing::{NormStats, RawFeatures, OBS_DIM};
use overtake_core::track::TrackGeometry;
use overtake_core::vehicle::Action;
use overtake_core::{Result, SimError};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{read_u32, read_u64, Mlp};
use crate::sac::{act_with, ActionMode, ReplayBuffer, SacAgent, SacConfig, Transition, UpdateStats, ACT_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Ordered stages 1, 2[, 3] with the stage invariants enforced.
    #[default]
    Curriculum,
    /// A single stage trained from a fresh agent, e.g. the no-curriculum baseline.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: u64,
    #[serde(default = "yes")]
    pub carry_buffer: bool,
    #[serde(default = "yes")]
    pub reinit_exploration: bool,
    pub env: EnvConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub name: String,
    pub mode: TrainMode,
    pub seeds: Vec<u64>,
    pub n_workers: usize,
    pub cars_per_worker: usize,
    /// Environment steps with uniform random actions that also feed the
    /// normalization statistics.
    pub start_steps: u64,
    /// Environment steps collected per gradient update.
    pub update_every: u64,
    pub epoch_steps: u64,
    /// Optional explicit checkpoint path per stage; defaults under the output root.
    pub checkpoints: Vec<String>,
    pub sac: SacConfig,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            name: "run".into(),
            mode: TrainMode::Curriculum,
            seeds: vec![0],
            n_workers: 4,
            cars_per_worker: 20,
            start_steps: 40_000,
            update_every: 20,
            epoch_steps: 20_000,
            checkpoints: Vec::new(),
            sac: SacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: RunSettings,
    pub stage: Vec<StageConfig>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: RunManifest = toml::from_str(text).map_err(|e| SimError::config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SimError::config(format!("cannot read manifest {}: {e}", path.display())))?;
        RunManifest::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest types always serialize")
    }

    /// Enforces the stage structure before any training starts.
    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.n_workers == 0 || r.cars_per_worker == 0 || r.update_every == 0 || r.epoch_steps == 0 {
            return Err(SimError::config("workers, cars per worker, update cadence and epoch length must be positive"));
        }
        if r.seeds.is_empty() {
            return Err(SimError::config("manifest lists no seeds"));
        }
        r.sac.validate()?;
        if self.stage.is_empty() {
            return Err(SimError::config("manifest has no stages"));
        }
        if !r.checkpoints.is_empty() && r.checkpoints.len() != self.stage.len() {
            return Err(SimError::config("give one checkpoint path per stage or none"));
        }
        for s in &self.stage {
            let track = TrackGeometry::load(&s.env.track)?;
            s.env.validate(&track)?;
        }
        match r.mode {
            TrainMode::Scratch => {
                if self.stage.len() != 1 {
                    return Err(SimError::config("scratch runs have exactly one stage"));
                }
            }
            TrainMode::Curriculum => {
                for (i, s) in self.stage.iter().enumerate() {
                    if s.stage as usize != i + 1 || s.stage > 3 {
                        return Err(SimError::config(format!("stage ids must run 1, 2, 3 in order; found {} at position {}", s.stage, i + 1)));
                    }
                    let racing = s.env.reward == RewardKind::Racing;
                    if s.stage == 1 && !(racing && s.env.n_opponents == 0) {
                        return Err(SimError::config("stage 1 uses the racing reward without opponents"));
                    }
                    if s.stage > 1 && (racing || s.env.n_opponents == 0) {
                        return Err(SimError::config(format!("stage {} uses the overtaking reward with opponents", s.stage)));
                    }
                }
                if let (Some(s2), Some(s3)) = (self.stage.get(1), self.stage.get(2)) {
                    let (a, b) = (&s2.env.weights, &s3.env.weights);
                    if b.c_w < a.c_w || b.c_c < a.c_c {
                        return Err(SimError::config(format!(
                            "stage-3 collision weights ({}, {}) must not be below stage 2 ({}, {})",
                            b.c_w, b.c_c, a.c_w, a.c_c
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.stage.iter().map(|s| s.steps).sum()
    }
}

/// Frozen policy and statistics handed to sampling workers.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub policy: Mlp<f32>,
    pub stats: NormStats,
    pub sac: SacConfig,
}

/// One environment step as seen by a worker, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStep {
    pub instance: usize,
    pub obs: Box<RawFeatures>,
    pub action: [f64; ACT_DIM],
    pub reward: f64,
    pub next_obs: Box<RawFeatures>,
    /// The episode hit its step limit on this transition (not a terminal state).
    pub episode_end: bool,
    pub ego_cp_at_reset: Option<f64>,
}

struct Instance {
    env: RaceEnv,
    rng: ChaCha8Rng,
    current: Box<RawFeatures>,
}

impl Instance {
    fn new(config: &EnvConfig, track: &Arc<TrackGeometry>, seed: u64) -> Result<(Self, f64)> {
        let mut env = RaceEnv::new(config.clone(), track.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = env.reset(rng.next_u64())?;
        let cp = r.info.cp[0];
        Ok((Instance { env, rng, current: Box::new(r.features) }, cp))
    }
}

enum Command {
    Step { count: usize, snapshot: Option<Arc<PolicySnapshot>> },
    Stop,
}

struct Worker {
    tx: Sender<Command>,
    rx: Receiver<Result<Vec<RawStep>>>,
    handle: Option<JoinHandle<()>>,
    size: usize,
}

fn worker_loop(mut instances: Vec<Instance>, offset: usize, rx: Receiver<Command>, tx: Sender<Result<Vec<RawStep>>>) {
    while let Ok(Command::Step { count, snapshot }) = rx.recv() {
        let out = step_instances(&mut instances[..count], offset, snapshot.as_deref());
        if tx.send(out).is_err() {
            return;
        }
    }
}

fn step_instances(instances: &mut [Instance], offset: usize, snapshot: Option<&PolicySnapshot>) -> Result<Vec<RawStep>> {
    let n = instances.len();
    let actions: Vec<[f64; ACT_DIM]> = match snapshot {
        None => instances
            .iter_mut()
            .map(|i| [i.rng.random_range(-1.0..=1.0), i.rng.random_range(-1.0..=1.0)])
            .collect(),
        Some(s) => {
            let mut obs = Vec::with_capacity(n * OBS_DIM);
            for i in instances.iter() {
                obs.extend_from_slice(&s.stats.normalize(&i.current)?.0);
            }
            let head = crate::sac::split_head(&s.policy.predict(&obs, n), s.sac.log_std_min, s.sac.log_std_max);
            // noise comes from each instance's own stream so results do not
            // depend on how instances are spread over workers
            instances
                .iter_mut()
                .enumerate()
                .map(|(r, inst)| {
                    let mut a = [0.0; ACT_DIM];
                    for (j, aj) in a.iter_mut().enumerate() {
                        let k = r * ACT_DIM + j;
                        let xi: f64 = inst.rng.sample(rand_distr::StandardNormal);
                        *aj = (head.mean[k] + head.log_std[k].exp() * xi).tanh();
                    }
                    a
                })
                .collect()
        }
    };
    let mut out = Vec::with_capacity(n);
    for (k, (inst, a)) in instances.iter_mut().zip(actions).enumerate() {
        let r = inst.env.step(Action::from_unit(a))?;
        let next = Box::new(r.features);
        let mut reset_cp = None;
        let obs = std::mem::replace(&mut inst.current, next.clone());
        if r.done {
            let seed = inst.rng.next_u64();
            let fresh = inst.env.reset(seed)?;
            reset_cp = Some(fresh.info.cp[0]);
            inst.current = Box::new(fresh.features);
        }
        out.push(RawStep {
            instance: offset + k,
            obs,
            action: a,
            reward: r.reward,
            next_obs: next,
            episode_end: r.done,
            ego_cp_at_reset: reset_cp,
        });
    }
    Ok(out)
}

/// Environment instances spread over persistent worker threads. Every round
/// steps each active instance once and returns the steps in instance order.
pub struct WorkerPool {
    workers: Vec<Worker>,
    initial_cp: Vec<f64>,
}

impl WorkerPool {
    pub fn new(config: &EnvConfig, n_workers: usize, cars_per_worker: usize, seed: u64) -> Result<Self> {
        if n_workers == 0 || cars_per_worker == 0 {
            return Err(SimError::config("a worker pool needs at least one instance"));
        }
        let track = Arc::new(TrackGeometry::load(&config.track)?);
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let mut workers = Vec::with_capacity(n_workers);
        let mut initial_cp = Vec::new();
        for w in 0..n_workers {
            let mut instances = Vec::with_capacity(cars_per_worker);
            for _ in 0..cars_per_worker {
                let (inst, cp) = Instance::new(config, &track, seeder.next_u64())?;
                instances.push(inst);
                initial_cp.push(cp);
            }
            let (ctx, crx) = channel();
            let (rtx, rrx) = channel();
            let offset = w * cars_per_worker;
            let handle = std::thread::Builder::new()
                .name(format!("sampler-{w}"))
                .spawn(move || worker_loop(instances, offset, crx, rtx))?;
            workers.push(Worker { tx: ctx, rx: rrx, handle: Some(handle), size: cars_per_worker });
        }
        Ok(WorkerPool { workers, initial_cp })
    }

    pub fn instances(&self) -> usize {
        self.workers.iter().map(|w| w.size).sum()
    }

    /// Ego arc length of every instance right after its first reset.
    pub fn initial_cp(&self) -> &[f64] {
        &self.initial_cp
    }

    /// Steps the first `count` instances once. Without a snapshot the
    /// actions are uniform random.
    pub fn round(&mut self, count: usize, snapshot: Option<&Arc<PolicySnapshot>>) -> Result<Vec<RawStep>> {
        let mut left = count.min(self.instances());
        let mut busy = Vec::new();
        for (i, w) in self.workers.iter().enumerate() {
            if left == 0 {
                break;
            }
            let k = left.min(w.size);
            left -= k;
            w.tx.send(Command::Step { count: k, snapshot: snapshot.cloned() })
                .map_err(|_| SimError::contract("sampling worker exited"))?;
            busy.push(i);
        }
        let mut out = Vec::with_capacity(count);
        for i in busy {
            let steps = self.workers[i].rx.recv().map_err(|_| SimError::contract("sampling worker exited"))??;
            out.extend(steps);
        }
        Ok(out)
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        for w in &self.workers {
            let _ = w.tx.send(Command::Stop);
        }
        for w in &mut self.workers {
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }
}

/// Runs synchronized rounds until exactly `n_steps` transitions are delivered.
pub fn collect_parallel(pool: &mut WorkerPool, snapshot: Option<&Arc<PolicySnapshot>>, n_steps: usize) -> Result<Vec<RawStep>> {
    let mut out = Vec::with_capacity(n_steps);
    while out.len() < n_steps {
        let k = (n_steps - out.len()).min(pool.instances());
        out.extend(pool.round(k, snapshot)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub stage: u8,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub mean_episode_return: f64,
    pub eval_return: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub q1_loss: f64,
    pub policy_loss: f64,
}

impl EpochRow {
    pub const HEADER: &'static str =
        "epoch,stage,env_steps,updates,episodes,mean_episode_return,eval_return,alpha,entropy,q1_loss,policy_loss";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.stage,
            self.env_steps,
            self.updates,
            self.episodes,
            self.mean_episode_return,
            self.eval_return,
            self.alpha,
            self.entropy,
            self.q1_loss,
            self.policy_loss
        )
    }
}

struct RawTransition {
    obs: Box<RawFeatures>,
    action: [f64; ACT_DIM],
    reward: f64,
    next_obs: Box<RawFeatures>,
}

/// Everything that persists across stages of one training run.
pub struct Learner {
    pub agent: SacAgent,
    pub buffer: ReplayBuffer,
    pub stats: NormStats,
    pub env_steps: u64,
    pub stage: u8,
    pub settings: RunSettings,
    pub seed: u64,
    pub epochs: Vec<EpochRow>,
    pub track_id: String,
    warmup: Vec<RawTransition>,
    update_credit: u64,
    last_update: UpdateStats,
}

impl Clone for Learner {
    fn clone(&self) -> Self {
        Learner {
            agent: self.agent.clone(),
            buffer: self.buffer.clone(),
            stats: self.stats.clone(),
            env_steps: self.env_steps,
            stage: self.stage,
            settings: self.settings.clone(),
            seed: self.seed,
            epochs: self.epochs.clone(),
            track_id: self.track_id.clone(),
            warmup: self
                .warmup
                .iter()
                .map(|t| RawTransition { obs: t.obs.clone(), action: t.action, reward: t.reward, next_obs: t.next_obs.clone() })
                .collect(),
            update_credit: self.update_credit,
            last_update: self.last_update,
        }
    }
}

/// Observer called after every completed epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRow, &Learner) -> Result<()>;

impl Learner {
    pub fn new(settings: &RunSettings, seed: u64) -> Result<Self> {
        let agent = SacAgent::new(OBS_DIM, settings.sac.clone(), seed)?;
        Ok(Learner {
            agent,
            buffer: ReplayBuffer::new(OBS_DIM, settings.sac.buffer_capacity),
            stats: NormStats::new(),
            env_steps: 0,
            stage: 0,
            settings: settings.clone(),
            seed,
            epochs: Vec::new(),
            track_id: String::new(),
            warmup: Vec::new(),
            update_credit: 0,
            last_update: UpdateStats::default(),
        })
    }

    pub fn snapshot(&self) -> Option<Arc<PolicySnapshot>> {
        self.stats.is_frozen().then(|| {
            Arc::new(PolicySnapshot { policy: self.agent.policy.clone(), stats: self.stats.clone(), sac: self.agent.config.clone() })
        })
    }

    fn in_warmup(&self) -> bool {
        !self.stats.is_frozen()
    }

    /// Freezes the statistics and moves the raw warm-up transitions into replay.
    pub fn finish_warmup(&mut self) -> Result<()> {
        if self.stats.is_frozen() {
            return Ok(());
        }
        if self.stats.count() == 0 {
            self.stats = NormStats::identity();
        }
        self.stats.freeze();
        for t in std::mem::take(&mut self.warmup) {
            let tr = Transition {
                obs: self.stats.normalize(&t.obs)?.0.to_vec(),
                action: t.action.map(|a| a as f32),
                reward: t.reward as f32,
                next_obs: self.stats.normalize(&t.next_obs)?.0.to_vec(),
                done: false,
            };
            self.buffer.push(&tr);
        }
        Ok(())
    }

    fn ingest(&mut self, steps: Vec<RawStep>) -> Result<()> {
        for s in steps {
            self.env_steps += 1;
            if self.in_warmup() {
                self.stats.update(&s.obs)?;
                self.warmup.push(RawTransition { obs: s.obs, action: s.action, reward: s.reward, next_obs: s.next_obs });
                if self.env_steps >= self.settings.start_steps {
                    self.finish_warmup()?;
                }
            } else {
                let tr = Transition {
                    obs: self.stats.normalize(&s.obs)?.0.to_vec(),
                    action: s.action.map(|a| a as f32),
                    reward: s.reward as f32,
                    next_obs: self.stats.normalize(&s.next_obs)?.0.to_vec(),
                    done: false,
                };
                self.buffer.push(&tr);
                self.update_credit += 1;
            }
        }
        Ok(())
    }

    fn run_updates(&mut self) -> Result<u64> {
        let mut n = 0;
        while self.update_credit >= self.settings.update_every {
            self.update_credit -= self.settings.update_every;
            if self.buffer.len() >= self.agent.config.batch_size {
                self.last_update = self.agent.update(&self.buffer)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Greedy episode return on `config` from a fixed reset seed.
pub fn greedy_return(policy: &Mlp<f32>, sac: &SacConfig, stats: &NormStats, config: &EnvConfig, seed: u64) -> Result<f64> {
    let mut env = RaceEnv::from_config(config.clone())?;
    env.set_stats(Arc::new(stats.clone()))?;
    let mut r: StepResult = env.reset(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    while !r.done {
        let a = act_with(policy, sac, &r.observation.0, 1, ActionMode::Deterministic, &mut rng)[0];
        r = env.step(Action::from_unit(a))?;
        total += r.reward;
    }
    Ok(total)
}

/// Applies the stage-boundary surgery: keeps the mean path and critics,
/// reinitializes the exploration head and temperature, and keeps or drops
/// the replay buffer.
pub fn transition_stage(learner: &mut Learner, from: &StageConfig, to: &StageConfig) -> Result<()> {
    if to.stage != from.stage + 1 {
        return Err(SimError::contract(format!("cannot move from stage {} to stage {}", from.stage, to.stage)));
    }
    if to.reinit_exploration {
        learner.agent.reset_exploration();
    }
    if !to.carry_buffer {
        learner.buffer = ReplayBuffer::new(OBS_DIM, learner.buffer.capacity());
    }
    learner.stage = to.stage;
    Ok(())
}

/// Trains one stage for its step budget. Writes a checkpoint when a path is given.
pub fn run_stage(learner: &mut Learner, stage: &StageConfig, checkpoint: Option<&Path>, hook: Option<EpochHook>) -> Result<Vec<EpochRow>> {
    let track = TrackGeometry::load(&stage.env.track)?;
    stage.env.validate(&track)?;
    learner.stage = stage.stage;
    learner.track_id = stage.env.track.clone();
    let settings = learner.settings.clone();
    let pool_seed = learner.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(stage.stage);
    let mut rows = Vec::new();
    let mut hook = hook;
    if stage.steps > 0 {
        let mut pool = WorkerPool::new(&stage.env, settings.n_workers, settings.cars_per_worker, pool_seed)?;
        let mut done = 0u64;
        let mut snapshot = learner.snapshot();
        let mut epoch_returns = (0.0, 0u64);
        let mut running = vec![0.0; pool.instances()];
        let mut next_epoch = settings.epoch_steps;
        while done < stage.steps {
            let k = ((stage.steps - done) as usize).min(pool.instances());
            let steps = pool.round(k, snapshot.as_ref())?;
            for s in &steps {
                running[s.instance] += s.reward;
                if s.episode_end {
                    epoch_returns.0 += running[s.instance];
                    epoch_returns.1 += 1;
                    running[s.instance] = 0.0;
                }
            }
            done += steps.len() as u64;
            let was_warm = learner.in_warmup();
            learner.ingest(steps)?;
            let n = learner.run_updates()?;
            if n > 0 || (was_warm && !learner.in_warmup()) {
                snapshot = learner.snapshot();
            }
            if done >= next_epoch || done == stage.steps {
                if done == stage.steps && learner.in_warmup() {
                    learner.finish_warmup()?;
                }
                let eval_return = match learner.stats.is_frozen() {
                    true => greedy_return(&learner.agent.policy, &learner.agent.config, &learner.stats, &stage.env, learner.seed)?,
                    false => 0.0,
                };
                let u = learner.last_update;
                let row = EpochRow {
                    epoch: learner.epochs.len() as u64 + 1,
                    stage: stage.stage,
                    env_steps: learner.env_steps,
                    updates: learner.agent.updates,
                    episodes: epoch_returns.1,
                    mean_episode_return: if epoch_returns.1 > 0 { epoch_returns.0 / epoch_returns.1 as f64 } else { 0.0 },
                    eval_return,
                    alpha: learner.agent.alpha(),
                    entropy: u.entropy,
                    q1_loss: u.q1_loss,
                    policy_loss: u.policy_loss,
                };
                learner.epochs.push(row.clone());
                if let Some(h) = hook.as_mut() {
                    h(&row, learner)?;
                }
                rows.push(row);
                epoch_returns = (0.0, 0);
                next_epoch += settings.epoch_steps;
            }
        }
    }
    if learner.in_warmup() {
        learner.finish_warmup()?;
    }
    if let Some(path) = checkpoint {
        save_checkpoint(learner, path)?;
    }
    Ok(rows)
}

const CKPT_MAGIC: &[u8; 4] = b"OTCK";
const CKPT_VERSION: u32 = 1;

/// Path of the statistics file stored next to a checkpoint.
pub fn stats_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".stats");
    PathBuf::from(s)
}

/// Writes the agent checkpoint and its statistics file.
pub fn save_checkpoint(learner: &Learner, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&[learner.stage])?;
    w.write_all(&learner.stats.layout_hash().to_le_bytes())?;
    w.write_all(&learner.env_steps.to_le_bytes())?;
    write_str(&mut w, &learner.track_id)?;
    let sac = toml::to_string(&learner.agent.config).map_err(|e| SimError::config(e.to_string()))?;
    write_str(&mut w, &sac)?;
    learner.agent.write_to(&mut w)?;
    w.flush()?;
    learner.stats.save(&stats_path(path))?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(SimError::config("implausible string length in checkpoint"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| SimError::config("checkpoint string is not UTF-8"))
}

/// A loaded checkpoint with its verified statistics.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: u8,
    pub env_steps: u64,
    pub track_id: String,
    pub agent: SacAgent,
    pub stats: NormStats,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| SimError::config(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(SimError::config(format!("{} is not a checkpoint", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(SimError::config(format!("unsupported checkpoint version {version}")));
        }
        let mut stage = [0u8];
        r.read_exact(&mut stage)?;
        let hash = read_u64(&mut r)?;
        let env_steps = read_u64(&mut r)?;
        let track_id = read_str(&mut r)?;
        let sac: SacConfig = toml::from_str(&read_str(&mut r)?).map_err(|e| SimError::config(format!("checkpoint learner config: {e}")))?;
        let agent = SacAgent::read_from(&mut r, sac, 0)?;
        let stats = NormStats::load(&stats_path(path))?;
        if stats.layout_hash() != hash {
            return Err(SimError::config(format!(
                "statistics layout hash mismatch: checkpoint expects {hash:016x}, {} has {:016x}",
                stats_path(path).display(),
                stats.layout_hash()
            )));
        }
        Ok(Checkpoint { stage: stage[0], env_steps, track_id, agent, stats })
    }

    /// Rebuilds a learner that continues after this checkpoint's stage. The
    /// replay buffer is not stored, so it starts empty.
    pub fn into_learner(self, settings: &RunSettings, seed: u64) -> Result<Learner> {
        let mut learner = Learner::new(settings, seed)?;
        if self.agent.policy.sizes() != learner.agent.policy.sizes() {
            return Err(SimError::config("checkpoint network shape differs from the manifest"));
        }
        let mut agent = self.agent;
        agent.config.batch_size = settings.sac.batch_size;
        agent.reseed(seed);
        learner.agent = agent;
        learner.stats = self.stats;
        learner.env_steps = self.env_steps;
        learner.stage = self.stage;
        learner.track_id = self.track_id;
        Ok(learner)
    }
}

/// Output locations for one seed of a manifest.
pub fn checkpoint_paths(manifest: &RunManifest, root: &Path, seed: u64) -> Vec<PathBuf> {
    if !manifest.run.checkpoints.is_empty() {
        return manifest.run.checkpoints.iter().map(|p| PathBuf::from(p.replace("{seed}", &seed.to_string()))).collect();
    }
    manifest
        .stage
        .iter()
        .map(|s| root.join(&manifest.run.name).join(format!("seed{seed}")).join(format!("stage{}.ckpt", s.stage)))
        .collect()
}

/// Runs every stage of `manifest` for one seed, optionally continuing from a
/// checkpoint, and writes per-stage checkpoints plus the epoch CSV.
pub fn run_manifest(manifest: &RunManifest, seed: u64, root: &Path, resume: Option<&Path>, mut hook: Option<EpochHook>) -> Result<Learner> {
    manifest.validate()?;
    let paths = checkpoint_paths(manifest, root, seed);
    let (mut learner, first) = match resume {
        None => (Learner::new(&manifest.run, seed)?, 0),
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let idx = manifest.stage.iter().position(|s| s.stage == ck.stage + 1).ok_or_else(|| {
                SimError::config(format!("manifest has no stage after the checkpoint's stage {}", ck.stage))
            })?;
            (ck.into_learner(&manifest.run, seed)?, idx)
        }
    };
    for i in first..manifest.stage.len() {
        let stage = &manifest.stage[i];
        if i > 0 {
            transition_stage(&mut learner, &manifest.stage[i - 1], stage)?;
        }
        let h: Option<EpochHook> = match hook.as_mut() {
            Some(h) => Some(&mut **h),
            None => None,
        };
        run_stage(&mut learner, stage, Some(&paths[i]), h)?;
    }
    let log = root.join(&manifest.run.name).join(format!("seed{seed}")).join("epochs.csv");
    write_epoch_log(&learner.epochs, &log)?;
    Ok(learner)
}

pub fn write_epoch_log(rows: &[EpochRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", EpochRow::HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use overtake_core::reward::RewardWeights;

    fn stage(id: u8, opp: usize, kind: RewardKind, w: f64) -> StageConfig {
        StageConfig {
            stage: id,
            steps: 0,
            carry_buffer: true,
            reinit_exploration: true,
            env: EnvConfig {
                n_opponents: opp,
                initial_separation: 200.0,
                reward: kind,
                weights: RewardWeights { c_w: w, c_c: w, ..Default::default() },
                ..Default::default()
            },
        }
    }

    fn manifest(stages: Vec<StageConfig>) -> RunManifest {
        RunManifest { run: RunSettings::default(), stage: stages }
    }

    #[test]
    fn stage_structure_is_validated() {
        let good = manifest(vec![
            stage(1, 0, RewardKind::Racing, 0.005),
            stage(2, 1, RewardKind::Overtaking, 0.005),
            stage(3, 1, RewardKind::Overtaking, 0.01),
        ]);
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.stage[2].env.weights.c_w = 0.001;
        assert!(matches!(bad.validate(), Err(SimError::Config(_))));
        let bad = manifest(vec![stage(1, 1, RewardKind::Overtaking, 0.005)]);
        assert!(bad.validate().is_err());
        let mut scratch = bad.clone();
        scratch.run.mode = TrainMode::Scratch;
        assert!(scratch.validate().is_ok());
        let skip = manifest(vec![stage(1, 0, RewardKind::Racing, 0.005), stage(3, 1, RewardKind::Overtaking, 0.01)]);
        assert!(skip.validate().is_err());
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let m = manifest(vec![stage(1, 0, RewardKind::Racing, 0.005), stage(2, 1, RewardKind::Overtaking, 0.005)]);
        let back = RunManifest::parse(&m.to_toml()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn non_consecutive_transition_is_contract_error() {
        let mut l = Learner::new(&RunSettings { sac: SacConfig { hidden: vec![8, 8], ..Default::default() }, ..Default::default() }, 0).unwrap();
        let a = stage(1, 0, RewardKind::Racing, 0.005);
        let c = stage(3, 1, RewardKind::Overtaking, 0.01);
        assert!(matches!(transition_stage(&mut l, &a, &c), Err(SimError::Contract(_))));
    }

    #[test]
    fn stats_path_appends_suffix() {
        assert_eq!(stats_path(Path::new("/x/stage1.ckpt")), PathBuf::from("/x/stage1.ckpt.stats"));
    }
}

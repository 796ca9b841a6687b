//! Evaluation episodes under the fixed overtaking settings, lap timing, and
//! side-by-side agent comparison.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use overtake_core::env::{EnvConfig, RaceEnv, StepResult, DEFAULT_EPISODE_STEPS};
use overtake_core::reward::RewardKind;
use overtake_core::sensing::NormStats;
use overtake_core::vehicle::{builtin_ai_action, Action};
use overtake_core::{Result, SimError};
use overtake_learn::curriculum::Checkpoint;
use overtake_learn::nn::Mlp;
use overtake_learn::sac::{act_with, ActionMode, SacConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lead over every opponent, in meters of progress, that counts as a pass.
pub const SUCCESS_MARGIN: f64 = 10.0;
/// Episodes fail after this many nominal episode lengths.
pub const TIMEOUT_FACTOR: usize = 3;
pub const EVAL_OPPONENTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SettingId {
    A,
    B,
}

impl FromStr for SettingId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" | "a" => Ok(SettingId::A),
            "B" | "b" => Ok(SettingId::B),
            other => Err(format!("unknown setting `{other}`; expected one of: A, B")),
        }
    }
}

impl std::fmt::Display for SettingId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SettingId::A => "A",
            SettingId::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetting {
    pub id: SettingId,
    pub n_opponents: usize,
    pub separation: f64,
    pub repetitions: usize,
}

impl EvalSetting {
    pub fn new(id: SettingId) -> Self {
        let separation = match id {
            SettingId::A => 50.0,
            SettingId::B => 200.0,
        };
        EvalSetting { id, n_opponents: EVAL_OPPONENTS, separation, repetitions: 10 }
    }

    /// Environment for this setting on `track`. The episode cap is the timeout.
    pub fn env_config(&self, track: &str) -> EnvConfig {
        EnvConfig {
            track: track.to_string(),
            n_opponents: self.n_opponents,
            initial_separation: self.separation,
            reward: RewardKind::Overtaking,
            episode_steps: TIMEOUT_FACTOR * DEFAULT_EPISODE_STEPS,
            ..Default::default()
        }
    }
}

/// Anything that can drive the ego car during evaluation.
pub trait Driver {
    fn act(&mut self, env: &RaceEnv, last: &StepResult) -> Action;

    /// Called before every step with direct access to the environment.
    fn intervene(&mut self, _env: &mut RaceEnv) {}
}

/// Deterministic (mean) action of a trained policy.
pub struct PolicyDriver {
    policy: Mlp<f32>,
    config: SacConfig,
    rng: ChaCha8Rng,
}

impl PolicyDriver {
    pub fn new(policy: Mlp<f32>, config: SacConfig) -> Self {
        PolicyDriver { policy, config, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Driver for PolicyDriver {
    fn act(&mut self, _env: &RaceEnv, last: &StepResult) -> Action {
        let a = act_with(&self.policy, &self.config, &last.observation.0, 1, ActionMode::Deterministic, &mut self.rng);
        Action::from_unit(a[0])
    }
}

/// The rule-based opponent controller driving the ego.
pub struct BuiltinDriver {
    pub speed_scale: f64,
}

impl Driver for BuiltinDriver {
    fn act(&mut self, env: &RaceEnv, _last: &StepResult) -> Action {
        builtin_ai_action(&env.cars()[0], env.track(), &env.config().car, self.speed_scale)
    }
}

/// Coasts with the wheels straight.
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn act(&mut self, _env: &RaceEnv, _last: &StepResult) -> Action {
        Action::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub total_travel_time: f64,
    pub total_travel_distance: f64,
    pub total_car_collision_time: f64,
    pub total_wall_collision_time: f64,
    pub overtakes_completed: usize,
}

impl EpisodeMetrics {
    pub const CSV_HEADER: &'static str =
        "seed,success,steps,travel_time,travel_distance,car_collision_time,wall_collision_time,overtakes";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.6},{:.1},{:.1},{}",
            self.seed,
            self.success as u8,
            self.steps,
            self.total_travel_time,
            self.total_travel_distance,
            self.total_car_collision_time,
            self.total_wall_collision_time,
            self.overtakes_completed
        )
    }
}

fn leads(info: &overtake_core::env::StepInfo) -> usize {
    info.progress[1..].iter().filter(|&&p| info.progress[0] - p >= SUCCESS_MARGIN).count()
}

/// Runs one evaluation episode; the ego spawn point comes from `seed`.
pub fn run_episode(driver: &mut dyn Driver, config: &EnvConfig, stats: &Arc<NormStats>, seed: u64) -> Result<EpisodeMetrics> {
    let mut env = RaceEnv::from_config(config.clone())?;
    env.set_stats(stats.clone())?;
    let mut last = env.reset(seed)?;
    let dt = config.dt;
    let mut m = EpisodeMetrics {
        seed,
        success: false,
        steps: 0,
        total_travel_time: 0.0,
        total_travel_distance: 0.0,
        total_car_collision_time: 0.0,
        total_wall_collision_time: 0.0,
        overtakes_completed: 0,
    };
    let (mut wall_steps, mut car_steps) = (0usize, 0usize);
    while !last.done {
        driver.intervene(&mut env);
        let action = driver.act(&env, &last);
        let from = env.cars()[0].position;
        last = env.step(action)?;
        m.steps += 1;
        m.total_travel_distance += env.cars()[0].position.distance(from);
        wall_steps += last.info.wall_flags[0] as usize;
        car_steps += last.info.car_flags[0] as usize;
        if config.n_opponents > 0 && leads(&last.info) == config.n_opponents {
            m.success = true;
            break;
        }
    }
    m.total_travel_time = m.steps as f64 * dt;
    m.total_wall_collision_time = wall_steps as f64 * dt;
    m.total_car_collision_time = car_steps as f64 * dt;
    m.overtakes_completed = leads(&last.info);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub travel_time: MeanStd,
    pub travel_distance: MeanStd,
    pub car_collision_time: MeanStd,
    pub wall_collision_time: MeanStd,
    pub overtakes: MeanStd,
    /// Fastest successful episode.
    pub best: Option<EpisodeMetrics>,
}

impl EvalSummary {
    pub fn of(episodes: &[EpisodeMetrics]) -> Self {
        let col = |f: fn(&EpisodeMetrics) -> f64| MeanStd::of(&episodes.iter().map(f).collect::<Vec<_>>());
        let best = episodes
            .iter()
            .filter(|e| e.success)
            .min_by(|a, b| a.total_travel_time.total_cmp(&b.total_travel_time))
            .cloned();
        EvalSummary {
            episodes: episodes.len(),
            successes: episodes.iter().filter(|e| e.success).count(),
            travel_time: col(|e| e.total_travel_time),
            travel_distance: col(|e| e.total_travel_distance),
            car_collision_time: col(|e| e.total_car_collision_time),
            wall_collision_time: col(|e| e.total_wall_collision_time),
            overtakes: col(|e| e.overtakes_completed as f64),
            best,
        }
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub setting: SettingId,
    pub episodes: Vec<EpisodeMetrics>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", EpisodeMetrics::CSV_HEADER).unwrap();
        for e in &self.episodes {
            writeln!(s, "{}", e.csv()).unwrap();
        }
        s
    }
}

/// Evaluates a driver on `setting` for every seed in `seeds`.
pub fn evaluate_driver(
    driver: &mut dyn Driver,
    track: &str,
    stats: &Arc<NormStats>,
    setting: &EvalSetting,
    seeds: &[u64],
) -> Result<EvalReport> {
    let config = setting.env_config(track);
    let episodes = seeds.iter().map(|&s| run_episode(driver, &config, stats, s)).collect::<Result<Vec<_>>>()?;
    let summary = EvalSummary::of(&episodes);
    Ok(EvalReport { setting: setting.id, episodes, summary })
}

/// Evaluates the greedy policy of a checkpoint.
pub fn evaluate(checkpoint: &Checkpoint, setting: &EvalSetting, seeds: &[u64]) -> Result<EvalReport> {
    let mut driver = PolicyDriver::new(checkpoint.agent.policy.clone(), checkpoint.agent.config.clone());
    let stats = Arc::new(checkpoint.stats.clone());
    evaluate_driver(&mut driver, &checkpoint.track_id, &stats, setting, seeds)
}

/// Time for the ego to cover one full lap of progress when driving alone from
/// arc length 0, interpolated within the crossing step. `None` if the lap is
/// not completed within `max_steps`.
pub fn lap_time(driver: &mut dyn Driver, track: &str, stats: &Arc<NormStats>, max_steps: usize) -> Result<Option<f64>> {
    let config = EnvConfig { track: track.to_string(), episode_steps: max_steps, ..Default::default() };
    let mut env = RaceEnv::from_config(config)?;
    env.set_stats(stats.clone())?;
    let lap = env.track().total_length();
    let mut last = env.reset_at(0.0)?;
    let mut prev = 0.0;
    while !last.done {
        driver.intervene(&mut env);
        let a = driver.act(&env, &last);
        last = env.step(a)?;
        let p = last.info.progress[0];
        if p >= lap {
            let k = last.info.step as f64;
            return Ok(Some((k - 1.0 + (lap - prev) / (p - prev)) * env.config().dt));
        }
        prev = p;
    }
    Ok(None)
}

/// One row of an agent comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRow {
    pub label: String,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub setting: SettingId,
    pub rows: Vec<AgentRow>,
}

const COMPARE_COLUMNS: [&str; 12] = [
    "agent",
    "episodes",
    "success_rate",
    "travel_time_mean",
    "travel_time_std",
    "travel_distance_mean",
    "car_collision_time_mean",
    "car_collision_time_std",
    "wall_collision_time_mean",
    "wall_collision_time_std",
    "overtakes_mean",
    "best_travel_time",
];

impl Comparison {
    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let s = &r.summary;
                vec![
                    r.label.clone(),
                    s.episodes.to_string(),
                    format!("{:.2}", s.success_rate()),
                    format!("{:.2}", s.travel_time.mean),
                    format!("{:.2}", s.travel_time.std),
                    format!("{:.1}", s.travel_distance.mean),
                    format!("{:.2}", s.car_collision_time.mean),
                    format!("{:.2}", s.car_collision_time.std),
                    format!("{:.2}", s.wall_collision_time.mean),
                    format!("{:.2}", s.wall_collision_time.std),
                    format!("{:.2}", s.overtakes.mean),
                    s.best.as_ref().map_or_else(|| "-".to_string(), |b| format!("{:.1}", b.total_travel_time)),
                ]
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut s = COMPARE_COLUMNS.join(",");
        s.push('\n');
        for row in self.cells() {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Columns padded to a common width; labels left, numbers right aligned.
    pub fn text_table(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..COMPARE_COLUMNS.len())
            .map(|c| cells.iter().map(|r| r[c].len()).chain([COMPARE_COLUMNS[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |row: Vec<&str>| {
            row.iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = format!("setting {}\n", self.setting);
        out.push_str(&line(COMPARE_COLUMNS.to_vec()));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}

/// Evaluates every checkpoint on the same setting and seeds.
pub fn compare_agents(checkpoints: &[(String, Checkpoint)], setting: &EvalSetting, seeds: &[u64]) -> Result<Comparison> {
    if checkpoints.len() < 2 {
        return Err(SimError::contract("comparison needs at least two checkpoints"));
    }
    let rows = checkpoints
        .iter()
        .map(|(label, ck)| Ok(AgentRow { label: label.clone(), summary: evaluate(ck, setting, seeds)?.summary }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { setting: setting.id, rows })
}

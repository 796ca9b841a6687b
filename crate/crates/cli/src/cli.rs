//! Argument parsing and subcommand dispatch for the `overtake` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use overtake_core::SimError;
use overtake_learn::curriculum::{run_manifest, Checkpoint, EpochRow, Learner, RunManifest};

use crate::eval::{compare_agents, evaluate, EvalSetting, PolicyDriver, SettingId};
use crate::selftest;
use crate::trace::export_trace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKS_FAILED: i32 = 3;

pub const DATA_DIR_VAR: &str = "OVERTAKE_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "overtake-data";

pub const BUNDLED_MANIFESTS: [(&str, &str); 5] = [
    ("smoke", include_str!("../manifests/smoke.manifest")),
    ("agent1", include_str!("../manifests/agent1.manifest")),
    ("agent2", include_str!("../manifests/agent2.manifest")),
    ("agent3", include_str!("../manifests/agent3.manifest")),
    ("scratch", include_str!("../manifests/scratch.manifest")),
];

#[derive(Debug, Parser)]
#[command(name = "overtake", version, about = "Train and evaluate curriculum overtaking agents", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every stage of a manifest for one seed.
    Train {
        /// Manifest file, or the name of a bundled manifest (smoke, agent1, agent2, agent3, scratch).
        #[arg(long)]
        manifest: String,
        #[arg(long)]
        seed: u64,
        /// Continue after the stage stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's greedy policy and write per-episode metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_setting)]
        setting: SettingId,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// First episode seed; episodes use consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV path (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate several checkpoints on the same episodes and tabulate them.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_parser = parse_setting)]
        setting: SettingId,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comparison CSV path (default: under the data directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record one evaluation episode as a CSV trace and an SVG overlay.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_setting)]
        setting: SettingId,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle property suites.
    Selftest,
}

fn parse_setting(s: &str) -> Result<SettingId, String> {
    s.parse()
}

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_VAR).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from)
}

/// Reads a manifest from a path, falling back to the bundled set by name
/// (with or without the `.manifest` extension).
pub fn load_manifest(spec: &str) -> overtake_core::Result<RunManifest> {
    let path = Path::new(spec);
    if path.is_file() {
        return RunManifest::load(path);
    }
    let name = spec.strip_suffix(".manifest").unwrap_or(spec);
    match BUNDLED_MANIFESTS.iter().find(|(n, _)| *n == name) {
        Some((_, text)) => RunManifest::parse(text),
        None => Err(SimError::config(format!(
            "manifest `{spec}` is neither a file nor a bundled manifest ({})",
            BUNDLED_MANIFESTS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn exit_code(e: &SimError) -> i32 {
    match e {
        SimError::Contract(_) => EXIT_USAGE,
        _ => EXIT_CONFIG,
    }
}

fn default_eval_path(checkpoint: &Path, setting: SettingId, seed: u64) -> PathBuf {
    let stem = checkpoint.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    checkpoint.with_file_name(format!("eval_{stem}_{setting}_seed{seed}.csv"))
}

fn write_file(path: &Path, contents: &str) -> overtake_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn execute(command: Command) -> overtake_core::Result<i32> {
    match command {
        Command::Train { manifest, seed, resume } => {
            let m = load_manifest(&manifest)?;
            let root = data_dir();
            let mut progress = |row: &EpochRow, _: &Learner| {
                println!(
                    "stage {} epoch {:>3}  steps {:>8}  updates {:>7}  eval return {:>9.2}  alpha {:.4}",
                    row.stage, row.epoch, row.env_steps, row.updates, row.eval_return, row.alpha
                );
                Ok(())
            };
            let learner = run_manifest(&m, seed, &root, resume.as_deref(), Some(&mut progress))?;
            let dir = root.join(&m.run.name).join(format!("seed{seed}"));
            println!("trained {} seed {seed}: {} environment steps, {} updates", m.run.name, learner.env_steps, learner.agent.updates);
            println!("outputs in {}", dir.display());
            Ok(EXIT_OK)
        }
        Command::Eval { checkpoint, setting, episodes, seed, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let seeds: Vec<u64> = (seed..seed + episodes as u64).collect();
            let report = evaluate(&ck, &EvalSetting::new(setting), &seeds)?;
            let path = out.unwrap_or_else(|| default_eval_path(&checkpoint, setting, seed));
            write_file(&path, &report.csv())?;
            let s = &report.summary;
            println!(
                "setting {setting}: {}/{} successful, travel time {:.2} ± {:.2} s, car collision {:.2} s, wall collision {:.2} s",
                s.successes, s.episodes, s.travel_time.mean, s.travel_time.std, s.car_collision_time.mean, s.wall_collision_time.mean
            );
            if let Some(b) = &s.best {
                println!("best: seed {} in {:.1} s", b.seed, b.total_travel_time);
            }
            println!("metrics written to {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Compare { checkpoints, setting, episodes, seed, out } => {
            let loaded = checkpoints
                .iter()
                .map(|p| Ok((p.display().to_string(), Checkpoint::load(p)?)))
                .collect::<overtake_core::Result<Vec<_>>>()?;
            let seeds: Vec<u64> = (seed..seed + episodes as u64).collect();
            let table = compare_agents(&loaded, &EvalSetting::new(setting), &seeds)?;
            let path = out.unwrap_or_else(|| data_dir().join(format!("compare_{setting}_seed{seed}.csv")));
            write_file(&path, &table.csv())?;
            print!("{}", table.text_table());
            println!("comparison written to {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Trace { checkpoint, setting, seed, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut driver = PolicyDriver::new(ck.agent.policy.clone(), ck.agent.config.clone());
            let (csv, svg) = export_trace(&mut driver, &ck.track_id, &Arc::new(ck.stats), &EvalSetting::new(setting), seed, &out)?;
            println!("trace written to {} and {}", csv.display(), svg.display());
            Ok(EXIT_OK)
        }
        Command::Selftest => {
            let mut ok = true;
            for c in selftest::run_all() {
                println!("{}", c.line());
                ok &= c.passed;
            }
            Ok(if ok { EXIT_OK } else { EXIT_CHECKS_FAILED })
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

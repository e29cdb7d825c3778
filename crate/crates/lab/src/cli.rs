//! The `sta` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sta_core::policy::Variant;
use sta_core::training::{evaluate_policy, EvalOptions, Regime};

use crate::ablation::{ablate_history, ablate_masking, masking_delta, write_csv};
use crate::bench::bench_inference;
use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::config::{load_config, ConfigError, RunConfig};
use crate::dataset::{generate_dataset, read_dataset};
use crate::run::{eval_options, train_run};
use crate::trace::{inspect_attention, InspectOptions, TraceError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sta", version, about = "Train, evaluate and analyse state transition attention policies")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML); omitted keys take their defaults
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed for data, initialisation, training and evaluation
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "sta-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll the scripted expert and write a demonstration dataset
    GenerateData {
        /// Number of successful episodes to keep (overrides data.n_episodes)
        #[arg(long)]
        episodes: Option<usize>,
        /// Disable perception-noise segments
        #[arg(long)]
        no_noise: bool,
    },
    /// Train a policy on a dataset, keeping the best and last checkpoints
    Train {
        /// Dataset directory written by generate-data
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Closed-loop success rate of a checkpoint
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Train with and without temporal masking and compare under masked inference
    AblateMasking {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Variants to train
        #[arg(long, value_delimiter = ',', default_value = "STA,STANDARD_XATTN")]
        variants: Vec<Variant>,
    },
    /// Evaluate one checkpoint at several inference histories
    AblateHistory {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Histories to evaluate (overrides eval.histories)
        #[arg(long, value_delimiter = ',')]
        histories: Option<Vec<usize>>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Export last-layer attention traces of one rollout as CSV tables
    InspectAttention {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Seed of the episode to roll
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        /// Pre-fill the history with copies of the first step
        #[arg(long)]
        identical_start: bool,
        /// Export standard cross-attention weights instead of STA traces
        #[arg(long)]
        standard: bool,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Per-step cost of cached STA, from-scratch STA and standard attention
    Bench {
        /// Histories to measure (overrides bench.histories)
        #[arg(long, value_delimiter = ',')]
        histories: Option<Vec<usize>>,
        /// Timed steps per measurement (overrides bench.steps)
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Inference history (overrides eval.history)
    #[arg(long)]
    pub history: Option<usize>,
    /// Episode regime: natural, occluded or unoccluded (overrides eval.regime)
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Hide observations on random spans during rollouts
    #[arg(long)]
    pub masked_inference: bool,
}

impl EvalArgs {
    fn apply(&self, opts: &mut EvalOptions) {
        if let Some(h) = self.history {
            opts.history = h;
        }
        if let Some(r) = self.regime {
            opts.regime = r;
        }
        opts.masked_inference |= self.masked_inference;
    }
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0:#}")]
    Usage(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || matches!(c.downcast_ref::<TraceError>(), Some(TraceError::NotSta(_) | TraceError::NoHistory))
            || matches!(
                c.downcast_ref::<sta_core::Error>(),
                Some(sta_core::Error::Usage(_) | sta_core::Error::Config { .. })
            )
    })
}

fn classify(e: anyhow::Error) -> Failure {
    if is_usage(&e) {
        Failure::Usage(e)
    } else {
        Failure::Runtime(e)
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli).map_err(classify) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_resolved(out)
        .with_context(|| format!("writing resolved config into {}", out.display()))?;
    Ok(())
}

fn checkpoint_policy(path: &Path) -> anyhow::Result<sta_core::policy::Policy> {
    let ckpt = load_checkpoint(path).map_err(|e| match e {
        CheckpointError::Io { .. } => anyhow::Error::new(e),
        other => anyhow::Error::new(other).context(format!("loading {}", path.display())),
    })?;
    Ok(ckpt.policy)
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    let mut cfg = load(c)?;
    let out = c.out.as_path();
    match &cli.command {
        Command::GenerateData { episodes, no_noise } => {
            if let Some(n) = episodes {
                cfg.data.n_episodes = *n;
            }
            cfg.data.noise &= !no_noise;
            prepare_out(out, &cfg)?;
            let ds = generate_dataset(&cfg.env, cfg.data.n_episodes, cfg.data.noise, c.seed, out)?;
            let s = &ds.manifest.stats;
            println!(
                "wrote {} episodes ({} steps) to {}: expert success {:.3}, {} with noise, {} occluded",
                s.kept,
                ds.manifest.total_steps,
                out.display(),
                s.expert_success_rate,
                s.with_noise,
                s.occluded
            );
        }
        Command::Train { data } => {
            let ds = read_dataset(data)?;
            prepare_out(out, &cfg)?;
            let outcome = train_run(&cfg, &ds.episodes, c.seed, &ds.manifest.fingerprint(), Some(out))?;
            let best = &outcome.metrics[outcome.best_epoch - 1];
            println!(
                "best epoch {} (validation success {:.3}); checkpoints in {}",
                outcome.best_epoch,
                best.eval_success,
                out.display()
            );
        }
        Command::Eval { checkpoint, eval } => {
            let policy = checkpoint_policy(checkpoint)?;
            let mut opts = eval_options(&cfg);
            eval.apply(&mut opts);
            prepare_out(out, &cfg)?;
            let report = evaluate_policy(&policy, &cfg.env, &opts, c.seed)?;
            write_json(&out.join("eval.json"), &report)?;
            println!(
                "{} success {:.3} over {} episodes (per seed {:?})",
                policy.config().variant.name(),
                report.success_rate,
                report.episodes,
                report.per_seed
            );
        }
        Command::AblateMasking { data, variants } => {
            let ds = read_dataset(data)?;
            prepare_out(out, &cfg)?;
            let rows = ablate_masking(&cfg, &ds.episodes, variants, c.seed, Some(out))?;
            write_csv(&out.join("masking.csv"), &rows)?;
            for &v in variants {
                if let Some(d) = masking_delta(&rows, v) {
                    println!("{}: masked minus unmasked training {:+.3}", v.name(), d);
                }
            }
        }
        Command::AblateHistory {
            checkpoint,
            histories,
            eval,
        } => {
            let policy = checkpoint_policy(checkpoint)?;
            let mut opts = eval_options(&cfg);
            eval.apply(&mut opts);
            let histories = histories.clone().unwrap_or_else(|| cfg.eval.histories.clone());
            prepare_out(out, &cfg)?;
            let rows = ablate_history(&policy, &cfg.env, &opts, &histories, c.seed)?;
            write_csv(&out.join("history.csv"), &rows)?;
            for r in &rows {
                println!("history {:>2}: success {:.3}", r.history, r.success);
            }
        }
        Command::InspectAttention {
            checkpoint,
            episode_seed,
            identical_start,
            standard,
            eval,
        } => {
            let policy = checkpoint_policy(checkpoint)?;
            let opts = InspectOptions {
                regime: eval.regime.unwrap_or(cfg.eval.regime),
                history: eval.history.unwrap_or(cfg.eval.history),
                identical_start: *identical_start,
                standard: *standard,
            };
            prepare_out(out, &cfg)?;
            let m = inspect_attention(&policy, &cfg.env, *episode_seed, &opts, out)?;
            println!(
                "{} steps (success {}), {} tables in {}",
                m.steps,
                m.success,
                m.files.len(),
                out.display()
            );
        }
        Command::Bench { histories, steps } => {
            let histories = histories.clone().unwrap_or_else(|| cfg.bench.histories.clone());
            let steps = steps.unwrap_or(cfg.bench.steps);
            let mut policy = cfg.policy.clone();
            policy.k_max = policy.k_max.max(histories.iter().copied().max().unwrap_or(0));
            prepare_out(out, &cfg)?;
            let report = bench_inference(&policy, &cfg.env, &histories, steps, c.seed)?;
            let csv = report.to_csv();
            fs::write(out.join("bench.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

//! Training runs with metrics logs and checkpoints on disk.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sta_core::env::Episode;
use sta_core::policy::Policy;
use sta_core::training::{train, EpochMetrics, EpochObserver, EvalOptions, TrainOutcome};
use sta_core::AdamState;

use crate::checkpoint::{save_checkpoint, Checkpoint, TrainingMeta};
use crate::config::RunConfig;

pub const METRICS_FORMAT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub format_version: u32,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_success: f64,
    /// Seconds since training started.
    pub wall_time: f64,
    pub best: bool,
}

/// Writes the metrics log and the best and last checkpoints as epochs finish.
pub struct RunRecorder {
    dir: PathBuf,
    log: BufWriter<fs::File>,
    start: Instant,
    meta: TrainingMeta,
}

impl RunRecorder {
    pub fn create(dir: &Path, seed: u64, dataset_fingerprint: &str) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let log = BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
        Ok(RunRecorder {
            dir: dir.to_path_buf(),
            log,
            start: Instant::now(),
            meta: TrainingMeta {
                epoch: 0,
                seed,
                dataset_fingerprint: dataset_fingerprint.to_string(),
            },
        })
    }

    fn record(&mut self, m: &EpochMetrics, policy: &Policy, adam: &AdamState, is_best: bool) -> anyhow::Result<()> {
        let rec = MetricsRecord {
            format_version: METRICS_FORMAT_VERSION,
            epoch: m.epoch,
            train_loss: m.train_loss,
            eval_success: m.eval_success,
            wall_time: self.start.elapsed().as_secs_f64(),
            best: is_best,
        };
        serde_json::to_writer(&mut self.log, &rec)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        self.meta.epoch = m.epoch;
        let ckpt = Checkpoint::new(policy.clone(), Some(adam.clone()), self.meta.clone());
        save_checkpoint(&self.dir.join(LAST_CHECKPOINT), &ckpt)?;
        if is_best {
            save_checkpoint(&self.dir.join(BEST_CHECKPOINT), &ckpt)?;
        }
        Ok(())
    }
}

impl EpochObserver for RunRecorder {
    fn on_epoch(&mut self, m: &EpochMetrics, policy: &Policy, adam: &AdamState, is_best: bool) -> sta_core::Result<()> {
        self.record(m, policy, adam, is_best)
            .map_err(|e| sta_core::Error::Observer(format!("{e:#}")))
    }
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Trains a fresh policy from `run`; with `out`, records the run there.
pub fn train_run(
    run: &RunConfig,
    episodes: &[Episode],
    seed: u64,
    dataset_fingerprint: &str,
    out: Option<&Path>,
) -> anyhow::Result<TrainOutcome> {
    let policy = Policy::new(run.policy.clone(), seed)?;
    let outcome = match out {
        Some(dir) => {
            let mut rec = RunRecorder::create(dir, seed, dataset_fingerprint)?;
            train(policy, episodes, &run.train, &run.env, seed, &mut rec)?
        }
        None => train(policy, episodes, &run.train, &run.env, seed, &mut ())?,
    };
    Ok(outcome)
}

/// Evaluation options from the run's `[train]` and `[eval]` tables.
pub fn eval_options(run: &RunConfig) -> EvalOptions {
    EvalOptions {
        n_episodes: run.train.eval_episodes,
        n_seeds: run.train.eval_seeds,
        history: run.eval.history,
        masked_inference: run.eval.masked_inference,
        regime: run.eval.regime,
        sequence_length: run.train.sequence_length,
        resample_probability: run.eval.resample_probability,
    }
}

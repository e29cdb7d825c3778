//! Sequence sampling, temporal masking, the masked MSE objective, the epoch
//! loop and closed-loop evaluation.

mod eval;

pub use eval::{eval_episode_seed, evaluate_policy, run_episode, EvalOptions, EvalReport, MaskScheduler, Regime};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Episode, StepRecord};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::policy::{Graph, Policy, StepInput};
use crate::rng::{derive_seed, from_seed, SimRng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `L`, steps per training sequence.
    pub sequence_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub mask_enabled: bool,
    /// Sequences drawn per epoch; `None` draws one per distinct window.
    pub sequences_per_epoch: Option<usize>,
    /// Episodes per seed for the final evaluation.
    pub eval_episodes: usize,
    pub eval_seeds: usize,
    /// Episodes per seed for the validation run after every epoch.
    pub val_episodes: usize,
    pub val_regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sequence_length: 16,
            batch_size: 16,
            learning_rate: 8e-5,
            epochs: 50,
            mask_enabled: true,
            sequences_per_epoch: None,
            eval_episodes: 100,
            eval_seeds: 3,
            val_episodes: 100,
            val_regime: Regime::Natural,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 {
            return Err(Error::config("sequence_length", "must be >= 1"));
        }
        if self.mask_enabled && self.sequence_length < 4 {
            return Err(Error::config(
                "sequence_length",
                format!(
                    "must be >= 4 when mask_enabled (span range [2, L/2] is empty for L = {})",
                    self.sequence_length
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.eval_seeds == 0 {
            return Err(Error::config("eval_seeds", "must be >= 1"));
        }
        if self.sequences_per_epoch == Some(0) {
            return Err(Error::config("sequences_per_epoch", "must be >= 1"));
        }
        Ok(())
    }

    /// Inclusive range of temporal-mask span lengths, `[2, L/2]`.
    pub fn mask_span_range(&self) -> (usize, usize) {
        (2, self.sequence_length / 2)
    }
}

/// `L` consecutive steps of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub episode: usize,
    /// Offset of the first real step in the episode.
    pub start: usize,
    pub steps: Vec<StepRecord>,
    /// Front-padding copies of the episode's first step.
    pub padded: Vec<bool>,
    /// `(start, length)` of the visually masked span.
    pub mask_span: Option<(usize, usize)>,
    /// Steps that contribute to the loss.
    pub loss_mask: Vec<bool>,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn visual_masked(&self, step: usize) -> bool {
        self.mask_span
            .is_some_and(|(s, k)| step >= s && step < s + k)
    }

    pub fn inputs(&self) -> Vec<StepInput<'_>> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| StepInput {
                obs: &s.obs_grid,
                proprio: &s.proprio,
                visual_masked: self.visual_masked(i),
            })
            .collect()
    }
}

/// Builds the sequence of `episode` starting at `start`; episodes shorter
/// than `l` are front-padded with their first step.
pub fn sequence_at(episodes: &[Episode], episode: usize, start: usize, l: usize) -> Result<TrainingSequence> {
    let ep = episodes
        .get(episode)
        .ok_or_else(|| Error::usage(format!("episode {episode} out of range")))?;
    if ep.steps.is_empty() {
        return Err(Error::usage(format!("episode {episode} has no steps")));
    }
    let len = ep.steps.len();
    let pad = l.saturating_sub(len);
    if pad == 0 && start + l > len {
        return Err(Error::usage(format!("offset {start} leaves fewer than {l} steps")));
    }
    let mut steps = Vec::with_capacity(l);
    let mut padded = Vec::with_capacity(l);
    for _ in 0..pad {
        steps.push(ep.steps[0].clone());
        padded.push(true);
    }
    let real = if pad > 0 { &ep.steps[..] } else { &ep.steps[start..start + l] };
    for s in real {
        steps.push(s.clone());
        padded.push(false);
    }
    let loss_mask = steps
        .iter()
        .zip(&padded)
        .map(|(s, &p)| !p && !s.noise_active)
        .collect();
    Ok(TrainingSequence {
        episode,
        start: if pad > 0 { 0 } else { start },
        steps,
        padded,
        mask_span: None,
        loss_mask,
    })
}

/// `(episode, start)` pairs from which sequences are drawn uniformly.
#[derive(Debug, Clone)]
pub struct SequenceIndex {
    cumulative: Vec<usize>,
    l: usize,
}

impl SequenceIndex {
    pub fn new(episodes: &[Episode], l: usize) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::usage("cannot sample sequences from an empty dataset"));
        }
        let mut cumulative = Vec::with_capacity(episodes.len());
        let mut total = 0;
        for (i, ep) in episodes.iter().enumerate() {
            if ep.steps.is_empty() {
                return Err(Error::usage(format!("episode {i} has no steps")));
            }
            total += ep.steps.len().saturating_sub(l) + 1;
            cumulative.push(total);
        }
        Ok(SequenceIndex { cumulative, l })
    }

    pub fn len(&self) -> usize {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Maps a flat pair index to `(episode, start)`.
    pub fn pair(&self, flat: usize) -> (usize, usize) {
        let ep = self.cumulative.partition_point(|&c| c <= flat);
        let before = if ep == 0 { 0 } else { self.cumulative[ep - 1] };
        (ep, flat - before)
    }

    pub fn sample(&self, rng: &mut SimRng) -> (usize, usize) {
        self.pair(rng.random_range(0..self.len()))
    }

    pub fn sequence_length(&self) -> usize {
        self.l
    }
}

pub fn sample_training_sequences(
    episodes: &[Episode],
    rng: &mut SimRng,
    cfg: &TrainConfig,
) -> Result<Vec<TrainingSequence>> {
    let index = SequenceIndex::new(episodes, cfg.sequence_length)?;
    sample_from_index(episodes, &index, rng, cfg.batch_size)
}

fn sample_from_index(
    episodes: &[Episode],
    index: &SequenceIndex,
    rng: &mut SimRng,
    count: usize,
) -> Result<Vec<TrainingSequence>> {
    (0..count)
        .map(|_| {
            let (ep, start) = index.sample(rng);
            sequence_at(episodes, ep, start, index.sequence_length())
        })
        .collect()
}

/// Masks visual input on a span of length `k ~ U[2, L/2]` placed uniformly
/// in `[1, L - k]`, so the oldest step always keeps its observation.
pub fn apply_temporal_mask(seq: &mut TrainingSequence, rng: &mut SimRng, cfg: &TrainConfig) -> Result<()> {
    if !cfg.mask_enabled {
        return Err(Error::usage("temporal masking is disabled in this configuration"));
    }
    let l = seq.len();
    let (lo, hi) = (2, l / 2);
    if lo > hi {
        return Err(Error::usage(format!("temporal mask needs L >= 4, got {l}")));
    }
    let k = rng.random_range(lo..=hi);
    let start = rng.random_range(1..=l - k);
    seq.mask_span = Some((start, k));
    Ok(())
}

/// Loss value and, when requested, the gradient of every parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Option<Vec<Vec<f64>>>,
    /// Steps that entered the loss.
    pub valid_steps: usize,
}

/// Mean squared error over loss-masked-in steps and joints of the batch,
/// using raw (unclamped) head outputs. Each step is predicted causally from
/// the steps before it in its sequence.
pub fn compute_loss(batch: &[TrainingSequence], policy: &Policy) -> Result<f64> {
    Ok(batch_loss(batch, policy, false)?.loss)
}

pub fn loss_and_gradients(batch: &[TrainingSequence], policy: &Policy) -> Result<LossOutput> {
    batch_loss(batch, policy, true)
}

fn batch_loss(batch: &[TrainingSequence], policy: &Policy, with_grads: bool) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::usage("loss of an empty batch"));
    }
    let m = policy.config().n_joints;
    let valid: usize = batch.iter().map(|s| s.loss_mask.iter().filter(|b| **b).count()).sum();
    let lens = policy.params().lens();
    let mut grads = with_grads.then(|| lens.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>());
    if valid == 0 {
        log::warn!("every step of the batch is excluded from the loss");
        return Ok(LossOutput {
            loss: 0.0,
            grads,
            valid_steps: 0,
        });
    }
    let denom = (valid * m) as f64;
    let history = policy.config().effective_history();
    let mut total = 0.0;
    for seq in batch {
        let rows: Vec<usize> = (0..seq.len()).filter(|&i| seq.loss_mask[i]).collect();
        if rows.is_empty() {
            continue;
        }
        let mut tape = if with_grads { Tape::new() } else { Tape::inference() };
        let g = Graph::bind(policy, &mut tape, with_grads);
        let pred = g.trajectory(&mut tape, &seq.inputs(), policy.band(history))?;
        let pred = tape.gather_rows(pred, &rows)?;
        let mut target = Vec::with_capacity(rows.len() * m);
        for &r in &rows {
            target.extend_from_slice(&seq.steps[r].expert_action[..m]);
        }
        let target = tape.constant(Tensor::matrix(rows.len(), m, target)?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum(sq);
        let loss = tape.scale(sum, 1.0 / denom);
        total += tape.value(loss).data()[0];
        if let Some(grads) = grads.as_mut() {
            tape.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(&g.vars) {
                if let Some(gv) = tape.grad(v) {
                    for (a, x) in acc.iter_mut().zip(gv) {
                        *a += x;
                    }
                }
            }
        }
    }
    Ok(LossOutput {
        loss: total,
        grads,
        valid_steps: valid,
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub eval_success: f64,
}

/// Called after every epoch's validation.
pub trait EpochObserver {
    fn on_epoch(&mut self, metrics: &EpochMetrics, policy: &Policy, adam: &AdamState, is_best: bool) -> Result<()>;
}

impl EpochObserver for () {
    fn on_epoch(&mut self, _: &EpochMetrics, _: &Policy, _: &AdamState, _: bool) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the highest validation success (earliest on ties).
    pub best: Policy,
    pub best_epoch: usize,
    pub last: Policy,
    pub adam: AdamState,
    pub metrics: Vec<EpochMetrics>,
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e;
const VAL_STREAM: u64 = 0x7661_6c;

/// Index of the best epoch: highest success, earliest on ties.
pub fn select_best(metrics: &[EpochMetrics]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, m) in metrics.iter().enumerate() {
        if best.is_none_or(|b| m.eval_success > metrics[b].eval_success) {
            best = Some(i);
        }
    }
    best
}

/// Epoch loop with Adam, per-epoch validation in the simulator and
/// best-checkpoint retention.
pub fn train(
    policy: Policy,
    episodes: &[Episode],
    cfg: &TrainConfig,
    env: &EnvConfig,
    seed: u64,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    env.validate()?;
    let index = SequenceIndex::new(episodes, cfg.sequence_length)?;
    let per_epoch = cfg.sequences_per_epoch.unwrap_or(index.len()).max(1);
    let mut rng = from_seed(derive_seed(seed, TRAIN_STREAM));
    let mut policy = policy;
    let mut adam = AdamState::new(cfg.learning_rate, &policy.params().lens());
    let mut metrics: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Policy)> = None;
    for epoch in 1..=cfg.epochs {
        let mut remaining = per_epoch;
        let mut batch_idx = 0;
        let mut loss_sum = 0.0;
        while remaining > 0 {
            let count = remaining.min(cfg.batch_size);
            remaining -= count;
            batch_idx += 1;
            let mut batch = sample_from_index(episodes, &index, &mut rng, count)?;
            if cfg.mask_enabled {
                for seq in &mut batch {
                    apply_temporal_mask(seq, &mut rng, cfg)?;
                }
            }
            let out = loss_and_gradients(&batch, &policy)?;
            let grads = out.grads.expect("gradients requested");
            if !out.loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch: batch_idx });
            }
            loss_sum += out.loss;
            let mut slices = policy.params_mut().data_slices_mut();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut slices, &grad_refs)?;
        }
        let val = EvalOptions {
            n_episodes: cfg.val_episodes,
            n_seeds: cfg.eval_seeds,
            history: policy.config().k_max,
            masked_inference: false,
            regime: cfg.val_regime,
            sequence_length: cfg.sequence_length,
            ..EvalOptions::default()
        };
        let report = evaluate_policy(&policy, env, &val, derive_seed(seed, VAL_STREAM + epoch as u64))?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batch_idx as f64,
            eval_success: report.success_rate,
        };
        metrics.push(m);
        let is_best = best
            .as_ref()
            .is_none_or(|(b, _)| m.eval_success > metrics[*b].eval_success);
        if is_best {
            best = Some((metrics.len() - 1, policy.clone()));
        }
        log::info!(
            "epoch {epoch}: loss {:.6} success {:.3}{}",
            m.train_loss,
            m.eval_success,
            if is_best { " (best)" } else { "" }
        );
        observer.on_epoch(&m, &policy, &adam, is_best)?;
    }
    let (best_idx, best_policy) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_policy,
        best_epoch: best_idx + 1,
        last: policy,
        adam,
        metrics,
    })
}

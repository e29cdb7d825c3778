//! Masking and history-length ablations.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sta_core::env::{EnvConfig, Episode};
use sta_core::policy::{Policy, Variant};
use sta_core::training::{evaluate_policy, EvalOptions};

use crate::config::RunConfig;
use crate::run::{eval_options, train_run};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingRow {
    pub variant: String,
    pub mask_enabled: bool,
    /// Success under masked inference.
    pub success: f64,
    pub best_epoch: usize,
}

/// Trains each of `variants` with and without temporal masking and evaluates
/// every result under masked inference.
pub fn ablate_masking(
    run: &RunConfig,
    episodes: &[Episode],
    variants: &[Variant],
    seed: u64,
    out: Option<&Path>,
) -> anyhow::Result<Vec<MaskingRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for mask_enabled in [true, false] {
            let mut r = run.clone();
            r.policy.variant = variant;
            r.train.mask_enabled = mask_enabled;
            let dir = out.map(|o| o.join(format!("{}_{}", variant.name().to_lowercase(), if mask_enabled { "mask" } else { "nomask" })));
            let outcome = train_run(&r, episodes, seed, "", dir.as_deref())?;
            let opts = EvalOptions {
                masked_inference: true,
                ..eval_options(&r)
            };
            let report = evaluate_policy(&outcome.best, &r.env, &opts, seed)?;
            log::info!(
                "{} mask={mask_enabled}: masked-inference success {:.3}",
                variant.name(),
                report.success_rate
            );
            rows.push(MaskingRow {
                variant: variant.name().to_string(),
                mask_enabled,
                success: report.success_rate,
                best_epoch: outcome.best_epoch,
            });
        }
    }
    Ok(rows)
}

/// Masked-minus-unmasked success for `variant`, when both rows exist.
pub fn masking_delta(rows: &[MaskingRow], variant: Variant) -> Option<f64> {
    let find = |m: bool| {
        rows.iter()
            .find(|r| r.variant == variant.name() && r.mask_enabled == m)
            .map(|r| r.success)
    };
    Some(find(true)? - find(false)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub history: usize,
    pub success: f64,
}

/// Evaluates one policy at each inference history.
pub fn ablate_history(
    policy: &Policy,
    env: &EnvConfig,
    base: &EvalOptions,
    histories: &[usize],
    seed: u64,
) -> anyhow::Result<Vec<HistoryRow>> {
    histories
        .iter()
        .map(|&history| {
            let opts = EvalOptions {
                history,
                ..base.clone()
            };
            let r = evaluate_policy(policy, env, &opts, seed)?;
            Ok(HistoryRow {
                history,
                success: r.success_rate,
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

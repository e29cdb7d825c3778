//! Attention-trace export for trained policies.
//!
//! For STA checkpoints `inspect_attention` writes, per step of one rollout:
//!
//! - `heatmap.csv`: head-averaged contribution of each history offset to each
//!   state token, summed over decoder tokens
//! - `head{h}.csv`: the same contributions for one head, with the raw
//!   transition affinity summed over current tokens
//! - `weights_head{h}.csv`: the softmax weights of each decoder token
//! - `token_summed.csv`: per head and offset, the contribution summed over
//!   all tokens
//! - `trace_manifest.json`
//!
//! Standard cross-attention checkpoints export `standard_head{h}.csv` with
//! the weight of every windowed key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sta_core::env::{env_reset_with_occlusion, env_step, render, EnvConfig, EnvState};
use sta_core::policy::{AttentionTrace, Policy, StepInput, Variant};
use sta_core::training::Regime;

use crate::checkpoint::parameter_hash;

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct InspectOptions {
    pub regime: Regime,
    pub history: usize,
    /// Fill the window with copies of the first step before rolling out.
    pub identical_start: bool,
    /// Allow standard cross-attention checkpoints.
    pub standard: bool,
}

impl Default for InspectOptions {
    fn default() -> Self {
        InspectOptions {
            regime: Regime::Occluded,
            history: 15,
            identical_start: false,
            standard: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format_version: u32,
    pub variant: String,
    pub episode_seed: u64,
    pub layer: usize,
    pub n_heads: usize,
    pub n_state_tokens: usize,
    pub history: usize,
    pub identical_start: bool,
    pub steps: usize,
    pub success: bool,
    pub files: Vec<String>,
}

/// Traces of one rollout, grouped by step; each inner vector is ordered by
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<Vec<AttentionTrace>>,
    /// World state before each step.
    pub states: Vec<EnvState>,
    pub success: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("attention traces need an STA checkpoint (got {0}); pass --standard to export standard weights")]
    NotSta(&'static str),
    #[error("NO_HISTORY checkpoints have no history to inspect")]
    NoHistory,
    #[error(transparent)]
    Core(#[from] sta_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Rolls one closed-loop episode and records last-layer attention traces.
pub fn record_rollout(policy: &Policy, env: &EnvConfig, seed: u64, opts: &InspectOptions) -> Result<Rollout, TraceError> {
    let cfg = policy.config();
    let mut session = policy.session(opts.history);
    session.record_traces(Some(cfg.n_layers - 1));
    let mut state = env_reset_with_occlusion(env, seed, match opts.regime {
        Regime::Natural => None,
        Regime::Occluded => Some(true),
        Regime::Unoccluded => Some(false),
    });
    if opts.identical_start {
        let obs = render(env, &state);
        for _ in 0..session.history() {
            session.step(StepInput {
                obs: &obs,
                proprio: &state.arm,
                visual_masked: false,
            })?;
        }
        session.take_traces();
    }
    let mut steps = Vec::new();
    let mut states = Vec::new();
    let mut success = false;
    for _ in 0..env.horizon {
        states.push(state.clone());
        let obs = render(env, &state);
        let out = session.step(StepInput {
            obs: &obs,
            proprio: &state.arm,
            visual_masked: false,
        })?;
        steps.push(session.take_traces());
        let (next, _, s) = env_step(env, &state, &out.action);
        state = next;
        if s {
            success = true;
            break;
        }
    }
    Ok(Rollout { steps, states, success })
}

struct Tables {
    dir: PathBuf,
    files: Vec<String>,
}

impl Tables {
    fn write(&mut self, name: String, header: &[String], rows: &[Vec<String>]) -> Result<(), TraceError> {
        let path = self.dir.join(&name);
        let csv_err = |source| TraceError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(|source| TraceError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(name);
        Ok(())
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Head-averaged contribution matrix of one step: rows are offsets
/// `0..=max_offset`, columns state tokens.
pub fn heatmap(traces: &[AttentionTrace]) -> Vec<Vec<f64>> {
    let k = traces[0].max_offset();
    let h = traces.len() as f64;
    (0..=k)
        .map(|delta| {
            let mut row = traces[0].token_scores(delta);
            for t in &traces[1..] {
                for (a, b) in row.iter_mut().zip(t.token_scores(delta)) {
                    *a += b;
                }
            }
            row.iter().map(|v| v / h).collect()
        })
        .collect()
}

pub fn inspect_attention(
    policy: &Policy,
    env: &EnvConfig,
    seed: u64,
    opts: &InspectOptions,
    out: &Path,
) -> Result<TraceManifest, TraceError> {
    let cfg = policy.config();
    match cfg.variant {
        Variant::Sta => {}
        Variant::NoHistory => return Err(TraceError::NoHistory),
        Variant::StandardXattn if !opts.standard => return Err(TraceError::NotSta(cfg.variant.name())),
        Variant::StandardXattn => {}
    }
    let before = parameter_hash(policy);
    let rollout = record_rollout(policy, env, seed, opts)?;
    debug_assert_eq!(before, parameter_hash(policy));
    fs::create_dir_all(out).map_err(|source| TraceError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut tables = Tables {
        dir: out.to_path_buf(),
        files: Vec::new(),
    };
    let n = cfg.n_state_tokens;
    let f = |v: f64| format!("{v:e}");
    if cfg.variant == Variant::Sta {
        let mut header = cols(&["step", "offset"]);
        header.extend((0..n).map(|j| format!("token_{j}")));
        let mut rows = Vec::new();
        for (t, traces) in rollout.steps.iter().enumerate() {
            for (delta, r) in heatmap(traces).into_iter().enumerate() {
                let mut row = vec![t.to_string(), delta.to_string()];
                row.extend(r.into_iter().map(f));
                rows.push(row);
            }
        }
        tables.write("heatmap.csv".into(), &header, &rows)?;

        for head in 0..cfg.n_heads {
            let mut contrib = Vec::new();
            let mut weights = Vec::new();
            for (t, traces) in rollout.steps.iter().enumerate() {
                let tr = &traces[head];
                for delta in 0..=tr.max_offset() {
                    let scores = tr.token_scores(delta);
                    let trans = &tr.transitions[delta];
                    for (j, s) in scores.iter().enumerate() {
                        let affinity: f64 = (0..trans.rows()).map(|i| trans.get(i, j)).sum();
                        contrib.push(vec![t.to_string(), delta.to_string(), j.to_string(), f(*s), f(affinity)]);
                    }
                }
                for i in 0..tr.weights.rows() {
                    for j in 0..tr.weights.cols() {
                        weights.push(vec![t.to_string(), i.to_string(), j.to_string(), f(tr.weights.get(i, j))]);
                    }
                }
            }
            tables.write(
                format!("head{head}.csv"),
                &cols(&["step", "offset", "token", "contribution", "transition"]),
                &contrib,
            )?;
            tables.write(
                format!("weights_head{head}.csv"),
                &cols(&["step", "row", "token", "weight"]),
                &weights,
            )?;
        }

        let mut summed = Vec::new();
        for (t, traces) in rollout.steps.iter().enumerate() {
            for tr in traces {
                for delta in 0..=tr.max_offset() {
                    summed.push(vec![t.to_string(), tr.head.to_string(), delta.to_string(), f(tr.summed_score(delta))]);
                }
            }
        }
        tables.write(
            "token_summed.csv".into(),
            &cols(&["step", "head", "offset", "score"]),
            &summed,
        )?;
    } else {
        for head in 0..cfg.n_heads {
            let mut rows = Vec::new();
            for (t, traces) in rollout.steps.iter().enumerate() {
                let w = &traces[head].weights;
                let entries = w.cols() / n;
                for i in 0..w.rows() {
                    for c in 0..w.cols() {
                        let offset = entries - 1 - c / n;
                        rows.push(vec![t.to_string(), i.to_string(), offset.to_string(), (c % n).to_string(), f(w.get(i, c))]);
                    }
                }
            }
            tables.write(
                format!("standard_head{head}.csv"),
                &cols(&["step", "row", "offset", "token", "weight"]),
                &rows,
            )?;
        }
    }
    let manifest = TraceManifest {
        format_version: TRACE_FORMAT_VERSION,
        variant: cfg.variant.name().to_string(),
        episode_seed: seed,
        layer: cfg.n_layers - 1,
        n_heads: cfg.n_heads,
        n_state_tokens: n,
        history: policy.band(opts.history),
        identical_start: opts.identical_start,
        steps: rollout.steps.len(),
        success: rollout.success,
        files: tables.files,
    };
    let path = out.join("trace_manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|source| TraceError::Io { path, source })?;
    Ok(manifest)
}

//! Temporal cross-attention, state transition attention (STA) and causal
//! self-attention over a sliding window of timesteps.
//!
//! Notation used throughout, per head:
//!
//! - `m` decoder tokens and `n` state tokens per timestep,
//! - `A_τ = Q_τ K_τᵀ` the same-time affinity of step `τ` (`m x n`),
//! - `S̃_τ = S_τ + e(t - τ)` the transition projection of step `τ` shifted by
//!   the relative-offset embedding seen from the current step `t`.
//!
//! STA scores the current step as
//!
//! ```text
//! Z_t = Σ_{τ = t-k}^{t} A_τ (S̃_τ S̃_tᵀ) / sqrt(d_k d_s max(k, 1))
//! out = softmax_rows(Z_t) V_t
//! ```
//!
//! so history only reweights the `n` current values, and the softmax is
//! always `n` wide. Standard temporal cross-attention instead softmaxes over
//! all `(k + 1) n` windowed keys and mixes all windowed values.

mod cache;

pub use cache::{CachedBlock, HistoryCache, TokenBlock};

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of past timesteps visible to the current one (`k_max`).
    pub max_history: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_model: 512,
            n_heads: 8,
            max_history: 15,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::config("n_heads", "d_model and n_heads must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                alloc::format!("must divide d_model ({} % {} != 0)", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    /// Per-head width shared by queries, keys, values and transition projections.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Learned relative-offset embeddings `e(δ)`, `δ ∈ [0, max_history]`, stored
/// as one `(max_history + 1) x d_model` table and sliced per head on demand.
#[derive(Debug, Clone)]
pub struct RelativePositionTable {
    table: Var,
    n_offsets: usize,
    n_heads: usize,
    head_dim: usize,
    slices: Vec<Option<Var>>,
}

impl RelativePositionTable {
    pub fn new(tape: &Tape, table: Var, n_heads: usize) -> Result<Self> {
        let shape = tape.shape(table);
        if shape.len() != 2 || !shape[1].is_multiple_of(n_heads) {
            return Err(Error::dim("relative_position_table", shape, &[n_heads]));
        }
        Ok(RelativePositionTable {
            table,
            n_offsets: shape[0],
            n_heads,
            head_dim: shape[1] / n_heads,
            slices: vec![None; shape[0] * n_heads],
        })
    }

    pub fn max_offset(&self) -> usize {
        self.n_offsets - 1
    }

    /// `1 x head_dim` row of `e(offset)` for one head.
    pub fn offset(&mut self, tape: &mut Tape, offset: usize, head: usize) -> Result<Var> {
        if offset >= self.n_offsets || head >= self.n_heads {
            return Err(Error::usage(alloc::format!(
                "relative offset {offset} (head {head}) outside table of {} offsets",
                self.n_offsets
            )));
        }
        let slot = offset * self.n_heads + head;
        if let Some(v) = self.slices[slot] {
            return Ok(v);
        }
        let row = tape.slice_rows(self.table, offset, 1)?;
        let v = tape.slice_cols(row, head * self.head_dim, self.head_dim)?;
        self.slices[slot] = Some(v);
        Ok(v)
    }
}

/// One timestep of the STA window for a single head.
#[derive(Debug, Clone, Copy)]
pub struct StaEntry {
    pub timestep: usize,
    /// `A_τ = Q_τ K_τᵀ`, `m x n`.
    pub affinity: Var,
    /// Raw transition projection `S_τ`, `n x d_s` (no positional term).
    pub s: Var,
}

#[derive(Debug, Clone)]
pub struct StaScores {
    /// Pre-softmax scores `Z_t`, `m x n`.
    pub z: Var,
    /// `(δ, S̃_{t-δ} S̃_tᵀ)` for every offset in the window, oldest first.
    pub transitions: Vec<(usize, Var)>,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `m x d_v`.
    pub out: Var,
    /// Pre-softmax scores.
    pub scores: Var,
    /// Row-stochastic attention weights.
    pub weights: Var,
}

/// `Q Kᵀ` for one timestep.
pub fn same_time_affinity(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    tape.matmul_nt(q, k)
}

fn check_window_steps(timesteps: impl Iterator<Item = usize>) -> Result<usize> {
    let mut last: Option<usize> = None;
    for t in timesteps {
        if let Some(prev) = last {
            if t != prev + 1 {
                return Err(Error::Sequencing {
                    expected: prev + 1,
                    got: t,
                });
            }
        }
        last = Some(t);
    }
    last.ok_or_else(|| Error::usage("attention window is empty"))
}

/// STA scores for the last entry of `window` (the current step).
pub fn sta_scores(
    tape: &mut Tape,
    window: &[StaEntry],
    pos: &mut RelativePositionTable,
    head: usize,
) -> Result<StaScores> {
    let t = check_window_steps(window.iter().map(|e| e.timestep))?;
    let current = window[window.len() - 1];
    let a_shape = tape.shape(current.affinity).to_vec();
    let s_shape = tape.shape(current.s).to_vec();
    if a_shape.len() != 2 || s_shape.len() != 2 || a_shape[1] != s_shape[0] {
        return Err(Error::dim("sta_scores", &a_shape, &s_shape));
    }
    for e in window {
        if tape.shape(e.affinity) != a_shape.as_slice() || tape.shape(e.s) != s_shape.as_slice() {
            return Err(Error::dim("sta_scores", tape.shape(e.affinity), &a_shape));
        }
    }
    let k = window.len() - 1;
    if k > pos.max_offset() {
        return Err(Error::usage(alloc::format!(
            "window spans {k} past steps but positions cover {}",
            pos.max_offset()
        )));
    }
    let d_k = pos.head_dim as f64;
    let d_s = s_shape[1] as f64;
    let scale = 1.0 / libm::sqrt(d_k * d_s * k.max(1) as f64);

    let e0 = pos.offset(tape, 0, head)?;
    let s_now = tape.add_row(current.s, e0)?;
    let mut acc: Option<Var> = None;
    let mut transitions = Vec::with_capacity(window.len());
    for e in window {
        let delta = t - e.timestep;
        let s_past = if delta == 0 {
            s_now
        } else {
            let ed = pos.offset(tape, delta, head)?;
            tape.add_row(e.s, ed)?
        };
        let transition = tape.matmul_nt(s_past, s_now)?;
        let term = tape.matmul(e.affinity, transition)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
        transitions.push((delta, transition));
    }
    let z = tape.scale(acc.expect("non-empty window"), scale);
    Ok(StaScores {
        z,
        transitions,
        scale,
    })
}

/// Full STA operator: `softmax_rows(Z_t) V_t`.
pub fn sta_attention(
    tape: &mut Tape,
    window: &[StaEntry],
    v_current: Var,
    pos: &mut RelativePositionTable,
    head: usize,
) -> Result<(AttentionOutput, StaScores)> {
    let scores = sta_scores(tape, window, pos, head)?;
    let weights = tape.softmax_rows(scores.z)?;
    let out = tape.matmul(weights, v_current)?;
    Ok((
        AttentionOutput {
            out,
            scores: scores.z,
            weights,
        },
        scores,
    ))
}

/// Keys and values of one windowed timestep for a single head.
#[derive(Debug, Clone, Copy)]
pub struct KvEntry {
    pub timestep: usize,
    pub k: Var,
    pub v: Var,
}

/// Temporal cross-attention: the current queries against every windowed key,
/// each key shifted by its relative-offset embedding.
pub fn standard_cross_attention(
    tape: &mut Tape,
    q: Var,
    window: &[KvEntry],
    pos: &mut RelativePositionTable,
    head: usize,
) -> Result<AttentionOutput> {
    let t = check_window_steps(window.iter().map(|e| e.timestep))?;
    if window.len() - 1 > pos.max_offset() {
        return Err(Error::usage("window longer than the key position table"));
    }
    let mut keys = Vec::with_capacity(window.len());
    let mut values = Vec::with_capacity(window.len());
    for e in window {
        let ed = pos.offset(tape, t - e.timestep, head)?;
        keys.push(tape.add_row(e.k, ed)?);
        values.push(e.v);
    }
    let (keys, values) = if keys.len() == 1 {
        (keys[0], values[0])
    } else {
        (tape.concat_rows(&keys)?, tape.concat_rows(&values)?)
    };
    let d_k = tape.shape(q)[1] as f64;
    let raw = tape.matmul_nt(q, keys)?;
    let scores = tape.scale(raw, 1.0 / libm::sqrt(d_k));
    let weights = tape.softmax_rows(scores)?;
    let out = tape.matmul(weights, values)?;
    Ok(AttentionOutput { out, scores, weights })
}

/// Columns of one head from a `rows x d_model` projection.
pub fn head_slice(tape: &mut Tape, x: Var, cfg: &AttentionConfig, head: usize) -> Result<Var> {
    if cfg.n_heads == 1 {
        return Ok(x);
    }
    let dh = cfg.head_dim();
    tape.slice_cols(x, head * dh, dh)
}

/// Runs `per_head` for every head, concatenates head outputs in head order and
/// applies the output projection `wo` (`d_model x d_model`).
pub fn multi_head(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    wo: Var,
    mut per_head: impl FnMut(&mut Tape, usize) -> Result<Var>,
) -> Result<Var> {
    cfg.validate()?;
    let mut outs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        outs.push(per_head(tape, h)?);
    }
    let joined = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(joined, wo)
}

/// Bias-free projection weights of one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Visibility mask for `steps * tokens_per_step` time-major tokens: token at
/// step `a` sees every token of steps `b` with `a - band <= b <= a`.
pub fn banded_causal_mask(steps: usize, tokens_per_step: usize, band: usize) -> Vec<bool> {
    let n = steps * tokens_per_step;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        let a = i / tokens_per_step;
        for j in 0..n {
            let b = j / tokens_per_step;
            mask[i * n + j] = b <= a && a - b <= band;
        }
    }
    mask
}

/// Multi-head self-attention over time-major tokens with a causal mask at
/// timestep granularity (siblings of the same step see each other), limited
/// to `cfg.max_history` past steps.
pub fn causal_self_attention(
    tape: &mut Tape,
    tokens: Var,
    tokens_per_step: usize,
    weights: &AttentionWeights,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let rows = tape.shape(tokens)[0];
    if tokens_per_step == 0 || !rows.is_multiple_of(tokens_per_step) {
        return Err(Error::dim("causal_self_attention", tape.shape(tokens), &[tokens_per_step]));
    }
    let steps = rows / tokens_per_step;
    let mask = banded_causal_mask(steps, tokens_per_step, cfg.max_history);
    let q = tape.matmul(tokens, weights.wq)?;
    let k = tape.matmul(tokens, weights.wk)?;
    let v = tape.matmul(tokens, weights.wv)?;
    let scale = 1.0 / libm::sqrt(cfg.head_dim() as f64);
    multi_head(tape, cfg, weights.wo, |tape, h| {
        let (qh, kh, vh) = (
            head_slice(tape, q, cfg, h)?,
            head_slice(tape, k, cfg, h)?,
            head_slice(tape, v, cfg, h)?,
        );
        let raw = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(raw, scale);
        let w = if steps == 1 {
            tape.softmax_rows(scores)?
        } else {
            tape.softmax_rows_masked(scores, &mask)?
        };
        tape.matmul(w, vh)
    })
}

/// Single-step self-attention for incremental inference: the current step's
/// tokens attend to cached keys/values of past steps followed by their own.
/// `past_k`/`past_v` hold full-width `m x d_model` projections, oldest first.
pub fn self_attention_step(
    tape: &mut Tape,
    q: Var,
    k_now: Var,
    v_now: Var,
    past_k: &[Var],
    past_v: &[Var],
    wo: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let (keys, values) = if past_k.is_empty() {
        (k_now, v_now)
    } else {
        let mut ks: Vec<Var> = past_k.to_vec();
        ks.push(k_now);
        let mut vs: Vec<Var> = past_v.to_vec();
        vs.push(v_now);
        (tape.concat_rows(&ks)?, tape.concat_rows(&vs)?)
    };
    let scale = 1.0 / libm::sqrt(cfg.head_dim() as f64);
    multi_head(tape, cfg, wo, |tape, h| {
        let (qh, kh, vh) = (
            head_slice(tape, q, cfg, h)?,
            head_slice(tape, keys, cfg, h)?,
            head_slice(tape, values, cfg, h)?,
        );
        let raw = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(raw, scale);
        let w = tape.softmax_rows(scores)?;
        tape.matmul(w, vh)
    })
}

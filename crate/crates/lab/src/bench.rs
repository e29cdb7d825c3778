//! Per-step inference cost of cached STA, from-scratch STA and standard
//! cross-attention.
//!
//! Wall time is measured on whole policy steps. Multiply-accumulates and
//! softmax widths come from the tape counters, both for whole steps and for
//! one head of the cross-attention kernel in isolation, where they are checked
//! against closed forms.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sta_core::attention::{sta_attention, standard_cross_attention, KvEntry, RelativePositionTable, StaEntry};
use sta_core::env::{env_reset, render, EnvConfig};
use sta_core::policy::{Policy, PolicyConfig, StepInput, Variant};
use sta_core::rng::{derive_seed, from_seed};
use sta_core::{Tape, TapeStats, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    StaCached,
    StaScratch,
    Standard,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::StaCached => "sta_cached",
            Method::StaScratch => "sta_scratch",
            Method::Standard => "standard",
        }
    }
}

/// One line of the benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub history: usize,
    pub method: Method,
    pub wall_us_per_step: f64,
    /// Every multiply-accumulate of one policy step.
    pub step_macs: u64,
    /// One head of the cross-attention kernel.
    pub head_attention_macs: u64,
    /// Closed-form count for `head_attention_macs`.
    pub head_attention_macs_expected: u64,
    pub softmax_width: usize,
    pub softmax_width_expected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, history: usize, method: Method) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.history == history && r.method == method)
    }

    /// Comma-separated report with a header line.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("history {history} exceeds k_max {k_max}")]
    History { history: usize, k_max: usize },
    #[error("{method} at k = {history}: {what} is {got}, expected {expected}")]
    Counter {
        method: &'static str,
        history: usize,
        what: &'static str,
        got: u64,
        expected: u64,
    },
    #[error(transparent)]
    Core(#[from] sta_core::Error),
}

/// Closed-form per-head MACs of the STA kernel over `k` past steps:
/// `(k + 1)(n² d_s + m n²)` for the routed transitions plus `m n d_v` for
/// the weighted values.
pub fn sta_head_macs(m: usize, n: usize, d: usize, k: usize) -> u64 {
    ((k + 1) * (n * n * d + m * n * n) + m * n * d) as u64
}

/// Closed-form per-head MACs of standard cross-attention over `k` past steps.
pub fn standard_head_macs(m: usize, n: usize, d: usize, k: usize) -> u64 {
    (2 * m * (k + 1) * n * d) as u64
}

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("matrix shape")
}

/// Tape counters of one head of each cross-attention kernel with `k` past
/// steps, for the shapes of `cfg`.
pub fn kernel_counts(cfg: &PolicyConfig, k: usize, seed: u64) -> Result<(TapeStats, TapeStats), BenchError> {
    let (m, n, d) = (cfg.n_joints, cfg.n_state_tokens, cfg.attention().head_dim());
    let mut rng = from_seed(seed);
    let mut tape = Tape::inference();
    let table = tape.constant(random(&mut rng, k + 1, d * cfg.n_heads));
    let mut pos = RelativePositionTable::new(&tape, table, cfg.n_heads)?;
    let sta_window: Vec<StaEntry> = (0..=k)
        .map(|t| StaEntry {
            timestep: t,
            affinity: tape.shared(Arc::new(random(&mut rng, m, n)), false),
            s: tape.shared(Arc::new(random(&mut rng, n, d)), false),
        })
        .collect();
    let v = tape.constant(random(&mut rng, n, d));
    tape.reset_stats();
    sta_attention(&mut tape, &sta_window, v, &mut pos, 0)?;
    let sta = tape.stats();

    let q = tape.constant(random(&mut rng, m, d));
    let kv_window: Vec<KvEntry> = (0..=k)
        .map(|t| KvEntry {
            timestep: t,
            k: tape.shared(Arc::new(random(&mut rng, n, d)), false),
            v: tape.shared(Arc::new(random(&mut rng, n, d)), false),
        })
        .collect();
    tape.reset_stats();
    standard_cross_attention(&mut tape, q, &kv_window, &mut pos, 0)?;
    Ok((sta, tape.stats()))
}

fn inputs(env: &EnvConfig, count: usize, seed: u64) -> Vec<(Tensor, Vec<f64>)> {
    (0..count)
        .map(|i| {
            let s = env_reset(env, derive_seed(seed, i as u64));
            (render(env, &s), s.arm.to_vec())
        })
        .collect()
}

fn step_input(x: &(Tensor, Vec<f64>)) -> StepInput<'_> {
    StepInput {
        obs: &x.0,
        proprio: &x.1,
        visual_masked: false,
    }
}

fn total_macs(stats: TapeStats, cache: u64) -> u64 {
    stats.macs + cache
}

/// Cached session: warms the window to `k` past steps, then times `steps`.
fn cached(policy: &Policy, data: &[(Tensor, Vec<f64>)], k: usize, steps: usize) -> Result<(f64, u64), BenchError> {
    let mut session = policy.session(k);
    for x in &data[..k] {
        session.step(step_input(x))?;
    }
    let mut last = total_macs(session.stats(), session.cache_macs());
    let mut per_step = 0;
    let start = Instant::now();
    for x in &data[k..k + steps] {
        session.step(step_input(x))?;
        let now = total_macs(session.stats(), session.cache_macs());
        per_step = now - last;
        last = now;
    }
    Ok((start.elapsed().as_secs_f64() * 1e6 / steps as f64, per_step))
}

/// Recomputes the whole `k + 1` step window for every step.
fn scratch(policy: &Policy, data: &[(Tensor, Vec<f64>)], k: usize, steps: usize) -> Result<(f64, u64), BenchError> {
    let mut per_step = 0;
    let start = Instant::now();
    for t in k..k + steps {
        let window: Vec<StepInput<'_>> = data[t - k..=t].iter().map(step_input).collect();
        let (_, stats) = policy.forward_trajectory_counted(&window, k)?;
        per_step = stats.macs;
    }
    Ok((start.elapsed().as_secs_f64() * 1e6 / steps as f64, per_step))
}

fn check(method: Method, history: usize, what: &'static str, got: u64, expected: u64) -> Result<(), BenchError> {
    if got == expected {
        Ok(())
    } else {
        Err(BenchError::Counter {
            method: method.name(),
            history,
            what,
            got,
            expected,
        })
    }
}

/// Benchmarks every history in `histories` with `steps` timed steps each.
/// Kernel MAC counts and softmax widths must match their closed forms.
pub fn bench_inference(
    policy_cfg: &PolicyConfig,
    env: &EnvConfig,
    histories: &[usize],
    steps: usize,
    seed: u64,
) -> Result<BenchReport, BenchError> {
    let mut sta_cfg = policy_cfg.clone();
    sta_cfg.variant = Variant::Sta;
    let mut std_cfg = policy_cfg.clone();
    std_cfg.variant = Variant::StandardXattn;
    let sta = Policy::new(sta_cfg.clone(), seed)?;
    let standard = Policy::new(std_cfg, seed)?;
    let k_max = sta_cfg.k_max;
    let steps = steps.max(1);
    let longest = histories.iter().copied().max().unwrap_or(0);
    if longest > k_max {
        return Err(BenchError::History { history: longest, k_max });
    }
    let data = inputs(env, longest + steps, seed);
    let (m, n, d) = (sta_cfg.n_joints, sta_cfg.n_state_tokens, sta_cfg.attention().head_dim());

    let mut rows = Vec::new();
    for &k in histories {
        let (sta_k, std_k) = kernel_counts(&sta_cfg, k, derive_seed(seed, k as u64))?;
        let widths = |s: TapeStats| (s.min_softmax_width.unwrap_or(0), s.max_softmax_width.unwrap_or(0));
        for (method, stats, expected_macs, expected_width) in [
            (Method::StaCached, sta_k, sta_head_macs(m, n, d, k), n),
            (Method::StaScratch, sta_k, sta_head_macs(m, n, d, k), n),
            (Method::Standard, std_k, standard_head_macs(m, n, d, k), (k + 1) * n),
        ] {
            check(method, k, "head attention MACs", stats.macs, expected_macs)?;
            let (lo, hi) = widths(stats);
            check(method, k, "minimum softmax width", lo as u64, expected_width as u64)?;
            check(method, k, "maximum softmax width", hi as u64, expected_width as u64)?;
            let (wall, step_macs) = match method {
                Method::StaCached => cached(&sta, &data, k, steps)?,
                Method::StaScratch => scratch(&sta, &data, k, steps)?,
                Method::Standard => cached(&standard, &data, k, steps)?,
            };
            rows.push(BenchRow {
                history: k,
                method,
                wall_us_per_step: wall,
                step_macs,
                head_attention_macs: stats.macs,
                head_attention_macs_expected: expected_macs,
                softmax_width: hi,
                softmax_width_expected: expected_width,
            });
        }
    }
    Ok(BenchReport { rows })
}

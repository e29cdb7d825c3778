use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::attention::{
    head_slice, multi_head, self_attention_step, standard_cross_attention, sta_attention,
    HistoryCache, KvEntry, RelativePositionTable, StaEntry, TokenBlock,
};
use crate::error::Result;
use crate::kernels;
use crate::policy::model::{Graph, Policy, StepInput};
use crate::tape::{Tape, TapeStats, Var};
use crate::tensor::Tensor;

/// Attention record of one head at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    pub timestep: usize,
    /// `S̃_{t-δ} S̃_tᵀ` (`n x n`), indexed by offset `δ`. Empty for standard
    /// cross-attention.
    pub transitions: Vec<Tensor>,
    /// Scaled contribution `A_{t-δ} S̃_{t-δ} S̃_tᵀ / sqrt(d_k d_s max(k,1))`
    /// of each offset to the scores (`m x n`), indexed by `δ`.
    pub contributions: Vec<Tensor>,
    /// Pre-softmax scores, `m x n` for STA, `m x (k+1)n` for standard.
    pub scores: Tensor,
    pub weights: Tensor,
}

impl AttentionTrace {
    /// Largest offset in the window.
    pub fn max_offset(&self) -> usize {
        self.contributions.len().saturating_sub(1)
    }

    /// Contribution of offset `δ` to each state-token column, summed over
    /// decoder tokens.
    pub fn token_scores(&self, delta: usize) -> Vec<f64> {
        let c = &self.contributions[delta];
        (0..c.cols())
            .map(|j| (0..c.rows()).map(|i| c.get(i, j)).sum())
            .collect()
    }

    /// Contribution of offset `δ` summed over all tokens.
    pub fn summed_score(&self, delta: usize) -> f64 {
        self.contributions[delta].data().iter().sum()
    }
}

/// Output of one incremental step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub action: Vec<f64>,
    pub raw: Vec<f64>,
}

type KvPair = (Arc<Tensor>, Arc<Tensor>);

/// Streaming inference for one trajectory. Every projection is computed once,
/// when its step is current, and reused from the caches afterwards.
#[derive(Debug)]
pub struct PolicySession<'p> {
    policy: &'p Policy,
    band: usize,
    cross: Vec<HistoryCache>,
    past_self: Vec<VecDeque<KvPair>>,
    timestep: usize,
    stats: TapeStats,
    trace_layer: Option<Option<usize>>,
    traces: Vec<AttentionTrace>,
}

impl Policy {
    /// Session that lets each step see up to `history` past steps (capped at
    /// the variant's effective history).
    pub fn session(&self, history: usize) -> PolicySession<'_> {
        let band = self.band(history);
        let cfg = self.config();
        PolicySession {
            policy: self,
            band,
            cross: (0..cfg.n_layers).map(|_| HistoryCache::new(band, cfg.n_heads)).collect(),
            past_self: (0..cfg.n_layers).map(|_| VecDeque::with_capacity(band)).collect(),
            timestep: 0,
            stats: TapeStats::default(),
            trace_layer: None,
            traces: Vec::new(),
        }
    }
}

fn merge_stats(acc: &mut TapeStats, s: TapeStats) {
    acc.macs += s.macs;
    acc.softmax_rows += s.softmax_rows;
    let pick = |a: Option<usize>, b: Option<usize>, f: fn(usize, usize) -> usize| match (a, b) {
        (Some(x), Some(y)) => Some(f(x, y)),
        (x, y) => x.or(y),
    };
    acc.min_softmax_width = pick(acc.min_softmax_width, s.min_softmax_width, usize::min);
    acc.max_softmax_width = pick(acc.max_softmax_width, s.max_softmax_width, usize::max);
}

impl<'p> PolicySession<'p> {
    pub fn policy(&self) -> &'p Policy {
        self.policy
    }

    /// Past steps visible to the current one.
    pub fn history(&self) -> usize {
        self.band
    }

    /// Index of the next step.
    pub fn timestep(&self) -> usize {
        self.timestep
    }

    /// Counters accumulated over every step so far.
    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    /// Multiply-accumulates spent on cached same-time affinities.
    pub fn cache_macs(&self) -> u64 {
        self.cross.iter().map(HistoryCache::macs).sum()
    }

    /// Records traces for `layer`, or for every layer when `None`.
    pub fn record_traces(&mut self, layer: Option<usize>) {
        self.trace_layer = Some(layer);
    }

    pub fn take_traces(&mut self) -> Vec<AttentionTrace> {
        core::mem::take(&mut self.traces)
    }

    pub fn reset(&mut self) {
        for c in &mut self.cross {
            c.clear();
        }
        for p in &mut self.past_self {
            p.clear();
        }
        self.timestep = 0;
    }

    fn tracing(&self, layer: usize) -> bool {
        matches!(self.trace_layer, Some(None)) || self.trace_layer == Some(Some(layer))
    }

    pub fn step(&mut self, input: StepInput<'_>) -> Result<StepOutput> {
        let policy = self.policy;
        let cfg = policy.config();
        let mut tape = Tape::inference();
        let g = Graph::bind(policy, &mut tape, false);
        let t = self.timestep;
        let states = g.encode(&mut tape, input)?;
        let mut x = g.input_tokens(&mut tape, input.proprio)?;
        let acfg = g.attention_config(self.band);
        for l in 0..cfg.n_layers {
            let lay = *g.layer(l);
            let h = tape.rmsnorm(x, g.var(lay.norm_cross))?;
            let q = tape.matmul(h, g.var(lay.wq))?;
            let k = tape.matmul(states, g.var(lay.wk))?;
            let v = tape.matmul(states, g.var(lay.wv))?;
            let s = match lay.ws {
                Some(ws) => Some(tape.matmul(states, g.var(ws))?),
                None => None,
            };
            self.cross[l].push(TokenBlock {
                timestep: t,
                q: tape.value(q).clone(),
                k: tape.value(k).clone(),
                v: tape.value(v).clone(),
                s: s.map(|s| tape.value(s).clone()),
            })?;
            let cache = &self.cross[l];
            let tracing = self.tracing(l);
            let mut traces = Vec::new();
            let mut pos = RelativePositionTable::new(&tape, g.var(lay.pos), cfg.n_heads)?;
            let c = multi_head(&mut tape, &acfg, g.var(lay.wo), |tape, head| {
                if s.is_some() {
                    let window: Vec<StaEntry> = cache
                        .window()
                        .map(|b| StaEntry {
                            timestep: b.timestep,
                            affinity: tape.shared(Arc::clone(&b.affinity[head]), false),
                            s: tape.shared(Arc::clone(&b.s[head]), false),
                        })
                        .collect();
                    let vh = head_slice(tape, v, &acfg, head)?;
                    let (o, scores) = sta_attention(tape, &window, vh, &mut pos, head)?;
                    if tracing {
                        traces.push(sta_trace(tape, cache, &window, &scores, o.weights, l, head, t));
                    }
                    Ok(o.out)
                } else {
                    let window: Vec<KvEntry> = cache
                        .window()
                        .map(|b| KvEntry {
                            timestep: b.timestep,
                            k: tape.shared(Arc::clone(&b.k[head]), false),
                            v: tape.shared(Arc::clone(&b.v[head]), false),
                        })
                        .collect();
                    let qh = head_slice(tape, q, &acfg, head)?;
                    let o = standard_cross_attention(tape, qh, &window, &mut pos, head)?;
                    if tracing {
                        traces.push(AttentionTrace {
                            layer: l,
                            head,
                            timestep: t,
                            transitions: Vec::new(),
                            contributions: Vec::new(),
                            scores: tape.value(o.scores).clone(),
                            weights: tape.value(o.weights).clone(),
                        });
                    }
                    Ok(o.out)
                }
            })?;
            self.traces.extend(traces);
            x = tape.add(x, c)?;

            let w = g.self_weights(l);
            let h = tape.rmsnorm(x, g.var(lay.norm_self))?;
            let sq = tape.matmul(h, w.wq)?;
            let sk = tape.matmul(h, w.wk)?;
            let sv = tape.matmul(h, w.wv)?;
            let past = &mut self.past_self[l];
            let (pk, pv): (Vec<Var>, Vec<Var>) = past
                .iter()
                .map(|(k, v)| (tape.shared(Arc::clone(k), false), tape.shared(Arc::clone(v), false)))
                .unzip();
            let sa = self_attention_step(&mut tape, sq, sk, sv, &pk, &pv, w.wo, &acfg)?;
            if self.band > 0 {
                if past.len() == self.band {
                    past.pop_front();
                }
                past.push_back((tape.value_arc(sk), tape.value_arc(sv)));
            }
            x = tape.add(x, sa)?;
            let f = g.ffn(&mut tape, l, x)?;
            x = tape.add(x, f)?;
        }
        let out = g.heads(&mut tape, x, 1)?;
        let raw = tape.value(out).data().to_vec();
        merge_stats(&mut self.stats, tape.stats());
        self.timestep += 1;
        Ok(StepOutput {
            action: policy.clamp_action(&raw),
            raw,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn sta_trace(
    tape: &Tape,
    cache: &HistoryCache,
    window: &[StaEntry],
    scores: &crate::attention::StaScores,
    weights: Var,
    layer: usize,
    head: usize,
    timestep: usize,
) -> AttentionTrace {
    let k = window.len() - 1;
    let mut transitions = alloc::vec![Tensor::scalar(0.0); k + 1];
    let mut contributions = alloc::vec![Tensor::scalar(0.0); k + 1];
    for (i, &(delta, tv)) in scores.transitions.iter().enumerate() {
        let tr = tape.value(tv).clone();
        let a = &cache.get(i).expect("window entry").affinity[head];
        let (m, n) = (a.rows(), a.cols());
        let mut c = kernels::matmul(a.data(), tr.data(), m, n, tr.cols());
        for x in &mut c {
            *x *= scores.scale;
        }
        contributions[delta] = Tensor::matrix(m, tr.cols(), c).expect("contribution shape");
        transitions[delta] = tr;
    }
    AttentionTrace {
        layer,
        head,
        timestep,
        transitions,
        contributions,
        scores: tape.value(scores.z).clone(),
        weights: tape.value(weights).clone(),
    }
}

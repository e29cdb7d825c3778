use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    causal_self_attention, head_slice, multi_head, same_time_affinity, standard_cross_attention,
    sta_attention, AttentionConfig, AttentionWeights, KvEntry, RelativePositionTable, StaEntry,
};
use crate::error::{Error, Result};
use crate::policy::config::{PolicyConfig, BIT_PLANES};
use crate::policy::params::{self, Layout, LayerLayout, ParamStore};
use crate::rng;
use crate::tape::{Tape, TapeStats, Var};
use crate::tensor::Tensor;

/// One timestep of policy input.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// Rendered grid, shape `obs_grid`.
    pub obs: &'a Tensor,
    /// Raw joint positions.
    pub proprio: &'a [f64],
    pub visual_masked: bool,
}

/// Encoder output for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTokens {
    pub timestep: usize,
    /// `n x d_model`: visual token(s) first, then the proprioceptive token.
    pub tokens: Tensor,
    pub visual_masked: bool,
}

/// Policy parameters together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    params: ParamStore,
    layout: Layout,
}

impl Policy {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::from_seed(seed);
        let (params, layout) = params::build(&config, &mut r);
        Ok(Policy {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Indices of the residual output projections, zero at initialization.
    pub fn residual_output_params(&self) -> Vec<usize> {
        params::residual_outputs(&self.layout)
    }

    /// Clamps raw head outputs to `±action_scale`.
    pub fn clamp_action(&self, raw: &[f64]) -> Vec<f64> {
        let s = self.config.action_scale;
        raw.iter().map(|&a| a.clamp(-s, s)).collect()
    }

    pub fn encode_state(&self, timestep: usize, input: StepInput<'_>) -> Result<StateTokens> {
        let mut tape = Tape::inference();
        let g = Graph::bind(self, &mut tape, false);
        let v = g.encode(&mut tape, input)?;
        Ok(StateTokens {
            timestep,
            tokens: tape.value(v).clone(),
            visual_masked: input.visual_masked,
        })
    }

    /// Decoder input tokens, `m x d_model`.
    pub fn init_input_tokens(&self, proprio: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let g = Graph::bind(self, &mut tape, false);
        let v = g.input_tokens(&mut tape, proprio)?;
        Ok(tape.value(v).clone())
    }

    /// One decoder block over a whole window: `tokens` is `(T m) x d_model`
    /// time-major, `states` is `(T n) x d_model`.
    pub fn decoder_block(
        &self,
        layer: usize,
        tokens: &Tensor,
        states: &Tensor,
        history: usize,
    ) -> Result<Tensor> {
        let (m, n) = (self.config.n_joints, self.config.n_state_tokens);
        if layer >= self.config.n_layers {
            return Err(Error::usage(alloc::format!(
                "layer {layer} out of range ({} layers)",
                self.config.n_layers
            )));
        }
        if !tokens.rows().is_multiple_of(m) || !states.rows().is_multiple_of(n) {
            return Err(Error::dim("decoder_block", tokens.shape(), states.shape()));
        }
        let steps = tokens.rows() / m;
        if states.rows() / n != steps {
            return Err(Error::Sequencing {
                expected: steps,
                got: states.rows() / n,
            });
        }
        let mut tape = Tape::inference();
        let g = Graph::bind(self, &mut tape, false);
        let x = tape.constant(tokens.clone());
        let st = tape.constant(states.clone());
        let band = self.band(history);
        let y = g.block(&mut tape, layer, x, st, steps, band)?;
        Ok(tape.value(y).clone())
    }

    /// Action for the last step of `history` (oldest first), computed from
    /// scratch over the whole window and clamped.
    pub fn forward_policy(&self, history: &[StepInput<'_>]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::usage("forward_policy needs at least one step"));
        }
        let limit = self.config.k_max + 1;
        if history.len() > limit {
            return Err(Error::usage(alloc::format!(
                "history of {} steps exceeds the {limit}-step window",
                history.len()
            )));
        }
        let raw = self.forward_trajectory(history, self.config.k_max)?;
        let m = self.config.n_joints;
        Ok(self.clamp_action(raw.row(raw.rows() - 1)).into_iter().take(m).collect())
    }

    /// Raw (unclamped) actions for every step of a trajectory in one causal
    /// pass, `T x m`. Step `t` sees steps `t - history ..= t`.
    pub fn forward_trajectory(&self, steps: &[StepInput<'_>], history: usize) -> Result<Tensor> {
        self.forward_trajectory_counted(steps, history).map(|(t, _)| t)
    }

    /// [`Policy::forward_trajectory`] plus the operation counters of the pass.
    pub fn forward_trajectory_counted(
        &self,
        steps: &[StepInput<'_>],
        history: usize,
    ) -> Result<(Tensor, TapeStats)> {
        let mut tape = Tape::inference();
        let g = Graph::bind(self, &mut tape, false);
        let out = g.trajectory(&mut tape, steps, self.band(history))?;
        Ok((tape.value(out).clone(), tape.stats()))
    }

    /// History actually used when `history` past steps are requested.
    pub fn band(&self, history: usize) -> usize {
        history.min(self.config.effective_history())
    }
}

/// Parameters registered on one tape.
pub(crate) struct Graph<'p> {
    cfg: &'p PolicyConfig,
    layout: &'p Layout,
    pub(crate) vars: Vec<Var>,
}

impl<'p> Graph<'p> {
    pub(crate) fn bind(policy: &'p Policy, tape: &mut Tape, requires_grad: bool) -> Self {
        Graph {
            cfg: &policy.config,
            layout: &policy.layout,
            vars: policy.params.register(tape, requires_grad),
        }
    }

    fn p(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub(crate) fn attention_config(&self, band: usize) -> AttentionConfig {
        AttentionConfig {
            d_model: self.cfg.d_model,
            n_heads: self.cfg.n_heads,
            max_history: band,
        }
    }

    pub(crate) fn layer(&self, l: usize) -> &LayerLayout {
        &self.layout.layers[l]
    }

    pub(crate) fn var(&self, i: usize) -> Var {
        self.p(i)
    }

    fn bit_planes(&self, obs: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.cfg.obs_grid;
        if obs.shape() != [c, h, w] {
            return Err(Error::dim("encode_state", obs.shape(), &self.cfg.obs_grid));
        }
        let c_in = self.cfg.encoder_channels();
        let mut planes = vec![0.0; c_in * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                let cell = obs.data()[ch * h * w + i];
                let bits = if cell.is_finite() && cell > 0.0 {
                    libm::round(cell) as u64
                } else {
                    0
                };
                for b in 0..BIT_PLANES {
                    if bits >> b & 1 == 1 {
                        planes[(ch * BIT_PLANES + b) * h * w + i] = 1.0;
                    }
                }
            }
        }
        Tensor::new(vec![c_in, h, w], planes)
    }

    fn check_proprio(&self, proprio: &[f64]) -> Result<()> {
        if proprio.len() != self.cfg.proprio_dim {
            return Err(Error::dim("proprio", &[proprio.len()], &[self.cfg.proprio_dim]));
        }
        Ok(())
    }

    /// State tokens for one step, `n x d_model`.
    pub(crate) fn encode(&self, tape: &mut Tape, input: StepInput<'_>) -> Result<Var> {
        let e = &self.layout.encoder;
        let d = self.cfg.d_model;
        let nv = self.cfg.visual_tokens();
        self.check_proprio(input.proprio)?;
        let planes = self.bit_planes(input.obs)?;
        let visual = if input.visual_masked {
            self.p(e.mask_embedding)
        } else {
            let x = tape.constant(planes);
            let c1 = tape.conv2d(x, self.p(e.conv1), 2)?;
            let c1 = tape.gelu(c1);
            let c2 = tape.conv2d(c1, self.p(e.conv2), 2)?;
            let c2 = tape.gelu(c2);
            let flat = tape.reshape(c2, &[1, self.cfg.cnn_features()])?;
            let lin = tape.matmul(flat, self.p(e.vis_w))?;
            let lin = tape.add_row(lin, self.p(e.vis_b))?;
            tape.reshape(lin, &[nv, d])?
        };
        let scaled: Vec<f64> = input.proprio.iter().map(|p| p * self.cfg.proprio_scale).collect();
        let p = tape.constant(Tensor::matrix(1, scaled.len(), scaled)?);
        let h = tape.matmul(p, self.p(e.pro_w1))?;
        let h = tape.add_row(h, self.p(e.pro_b1))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, self.p(e.pro_w2))?;
        let h = tape.add_row(h, self.p(e.pro_b2))?;
        let joined = tape.concat_rows(&[visual, h])?;
        tape.rmsnorm(joined, self.p(e.norm))
    }

    /// Per-joint decoder tokens, `m x d_model`. Row `i` embeds
    /// `[p_i, p_0, .., p_{m-1}]` and adds joint `i`'s positional embedding.
    pub(crate) fn input_tokens(&self, tape: &mut Tape, proprio: &[f64]) -> Result<Var> {
        self.check_proprio(proprio)?;
        let m = self.cfg.n_joints;
        let width = 1 + proprio.len();
        let s = self.cfg.proprio_scale;
        let mut feats = Vec::with_capacity(m * width);
        for i in 0..m {
            feats.push(proprio[i] * s);
            feats.extend(proprio.iter().map(|p| p * s));
        }
        let f = tape.constant(Tensor::matrix(m, width, feats)?);
        let x = tape.matmul(f, self.p(self.layout.input_w))?;
        let x = tape.add_row(x, self.p(self.layout.input_b))?;
        tape.add(x, self.p(self.layout.joint_pos))
    }

    /// Cross-attention sublayer over a whole window (before the residual add).
    fn cross_attention(
        &self,
        tape: &mut Tape,
        l: usize,
        h: Var,
        states: Var,
        steps: usize,
        band: usize,
    ) -> Result<Var> {
        let lay = *self.layer(l);
        let (m, n) = (self.cfg.n_joints, self.cfg.n_state_tokens);
        let acfg = self.attention_config(band);
        let q = tape.matmul(h, self.p(lay.wq))?;
        let k = tape.matmul(states, self.p(lay.wk))?;
        let v = tape.matmul(states, self.p(lay.wv))?;
        let s = match lay.ws {
            Some(ws) => Some(tape.matmul(states, self.p(ws))?),
            None => None,
        };
        let mut pos = RelativePositionTable::new(tape, self.p(lay.pos), self.cfg.n_heads)?;
        multi_head(tape, &acfg, self.p(lay.wo), |tape, head| {
            let qh = head_slice(tape, q, &acfg, head)?;
            let kh = head_slice(tape, k, &acfg, head)?;
            let vh = head_slice(tape, v, &acfg, head)?;
            let mut q_t = Vec::with_capacity(steps);
            let mut k_t = Vec::with_capacity(steps);
            let mut v_t = Vec::with_capacity(steps);
            for t in 0..steps {
                q_t.push(tape.slice_rows(qh, t * m, m)?);
                k_t.push(tape.slice_rows(kh, t * n, n)?);
                v_t.push(tape.slice_rows(vh, t * n, n)?);
            }
            let mut outs = Vec::with_capacity(steps);
            match s {
                Some(s) => {
                    let sh = head_slice(tape, s, &acfg, head)?;
                    let mut entries = Vec::with_capacity(steps);
                    for t in 0..steps {
                        entries.push(StaEntry {
                            timestep: t,
                            affinity: same_time_affinity(tape, q_t[t], k_t[t])?,
                            s: tape.slice_rows(sh, t * n, n)?,
                        });
                    }
                    for t in 0..steps {
                        let window = &entries[t - t.min(band)..=t];
                        let (o, _) = sta_attention(tape, window, v_t[t], &mut pos, head)?;
                        outs.push(o.out);
                    }
                }
                None => {
                    let entries: Vec<KvEntry> = (0..steps)
                        .map(|t| KvEntry {
                            timestep: t,
                            k: k_t[t],
                            v: v_t[t],
                        })
                        .collect();
                    for t in 0..steps {
                        let window = &entries[t - t.min(band)..=t];
                        let o = standard_cross_attention(tape, q_t[t], window, &mut pos, head)?;
                        outs.push(o.out);
                    }
                }
            }
            if outs.len() == 1 {
                Ok(outs[0])
            } else {
                tape.concat_rows(&outs)
            }
        })
    }

    pub(crate) fn ffn(&self, tape: &mut Tape, l: usize, x: Var) -> Result<Var> {
        let lay = self.layer(l);
        let h = tape.rmsnorm(x, self.p(lay.norm_ffn))?;
        let h = tape.matmul(h, self.p(lay.w1))?;
        let h = tape.add_row(h, self.p(lay.b1))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, self.p(lay.w2))?;
        tape.add_row(h, self.p(lay.b2))
    }

    pub(crate) fn self_weights(&self, l: usize) -> AttentionWeights {
        let lay = self.layer(l);
        AttentionWeights {
            wq: self.p(lay.sq),
            wk: self.p(lay.sk),
            wv: self.p(lay.sv),
            wo: self.p(lay.so),
        }
    }

    /// Pre-norm block: cross-attention, causal self-attention, feed-forward.
    pub(crate) fn block(
        &self,
        tape: &mut Tape,
        l: usize,
        x: Var,
        states: Var,
        steps: usize,
        band: usize,
    ) -> Result<Var> {
        let lay = *self.layer(l);
        let h = tape.rmsnorm(x, self.p(lay.norm_cross))?;
        let c = self.cross_attention(tape, l, h, states, steps, band)?;
        let x = tape.add(x, c)?;
        let h = tape.rmsnorm(x, self.p(lay.norm_self))?;
        let acfg = self.attention_config(band);
        let sa = causal_self_attention(tape, h, self.cfg.n_joints, &self.self_weights(l), &acfg)?;
        let x = tape.add(x, sa)?;
        let f = self.ffn(tape, l, x)?;
        tape.add(x, f)
    }

    /// Per-joint heads over final tokens (`(T m) x d`, time-major), giving
    /// raw actions `T x m`.
    pub(crate) fn heads(&self, tape: &mut Tape, x: Var, steps: usize) -> Result<Var> {
        let m = self.cfg.n_joints;
        let fin = tape.rmsnorm(x, self.p(self.layout.final_norm))?;
        let mut cols = Vec::with_capacity(m);
        for (j, hd) in self.layout.heads.iter().enumerate() {
            let rows: Vec<usize> = (0..steps).map(|t| t * m + j).collect();
            let r = tape.gather_rows(fin, &rows)?;
            let h = tape.matmul(r, self.p(hd.w1))?;
            let h = tape.add_row(h, self.p(hd.b1))?;
            let h = tape.gelu(h);
            let o = tape.matmul(h, self.p(hd.w2))?;
            cols.push(tape.add_row(o, self.p(hd.b2))?);
        }
        if cols.len() == 1 {
            Ok(cols[0])
        } else {
            tape.concat_cols(&cols)
        }
    }

    /// Full causal pass over `steps`, `T x m` raw actions.
    pub(crate) fn trajectory(
        &self,
        tape: &mut Tape,
        steps: &[StepInput<'_>],
        band: usize,
    ) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::usage("trajectory needs at least one step"));
        }
        let mut states = Vec::with_capacity(steps.len());
        let mut tokens = Vec::with_capacity(steps.len());
        for s in steps {
            states.push(self.encode(tape, *s)?);
            tokens.push(self.input_tokens(tape, s.proprio)?);
        }
        let (st, mut x) = if steps.len() == 1 {
            (states[0], tokens[0])
        } else {
            (tape.concat_rows(&states)?, tape.concat_rows(&tokens)?)
        };
        for l in 0..self.cfg.n_layers {
            x = self.block(tape, l, x, st, steps.len(), band)?;
        }
        self.heads(tape, x, steps.len())
    }
}

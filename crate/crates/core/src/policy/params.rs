use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::policy::config::PolicyConfig;
use crate::rng::SimRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter arrays in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter().map(|v| &**v)
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn arc(&self, i: usize) -> &Arc<Tensor> {
        &self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Mutable access; clones the array first if a tape still shares it.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    /// Mutable views of every array in registration order.
    pub fn data_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.values
            .iter_mut()
            .map(|v| Arc::make_mut(v).data_mut())
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn lens(&self) -> Vec<usize> {
        self.values.iter().map(|v| v.numel()).collect()
    }

    /// Replaces every array, checking names and shapes against `self`.
    pub fn assign(&mut self, arrays: Vec<(String, Tensor)>) -> Result<()> {
        if arrays.len() != self.len() {
            return Err(Error::usage(format!(
                "expected {} parameter arrays, got {}",
                self.len(),
                arrays.len()
            )));
        }
        for (i, (name, t)) in arrays.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::usage(format!(
                    "parameter {i} is {name:?}, expected {:?}",
                    self.names[i]
                )));
            }
            if t.shape() != self.values[i].shape() {
                return Err(Error::dim("assign", self.values[i].shape(), t.shape()));
            }
            self.values[i] = Arc::new(t);
        }
        Ok(())
    }

    /// Registers every array on `tape` without copying.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.shared(Arc::clone(v), requires_grad))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EncoderLayout {
    pub conv1: usize,
    pub conv2: usize,
    pub vis_w: usize,
    pub vis_b: usize,
    pub pro_w1: usize,
    pub pro_b1: usize,
    pub pro_w2: usize,
    pub pro_b2: usize,
    pub mask_embedding: usize,
    pub norm: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    pub norm_cross: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    /// Transition projection; absent for the standard cross-attention decoder.
    pub ws: Option<usize>,
    /// Relative-offset table, added to `S` (STA) or to `K` (standard).
    pub pos: usize,
    pub wo: usize,
    pub norm_self: usize,
    pub sq: usize,
    pub sk: usize,
    pub sv: usize,
    pub so: usize,
    pub norm_ffn: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct HeadLayout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub encoder: EncoderLayout,
    pub input_w: usize,
    pub input_b: usize,
    pub joint_pos: usize,
    pub layers: Vec<LayerLayout>,
    pub final_norm: usize,
    pub heads: Vec<HeadLayout>,
}

enum Init {
    Zeros,
    Ones,
    /// `N(0, 1/fan_in)`.
    FanIn(usize),
    Embed,
}

struct Builder<'a> {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    rng: &'a mut SimRng,
    embed_std: f64,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let mut t = Tensor::zeros(shape);
        let std = match init {
            Init::Zeros => None,
            Init::Ones => {
                t.data_mut().fill(1.0);
                None
            }
            Init::FanIn(f) => Some(1.0 / libm::sqrt(f as f64)),
            Init::Embed => Some(self.embed_std),
        };
        if let Some(std) = std {
            let dist = Normal::new(0.0, std).expect("positive std");
            for x in t.data_mut() {
                *x = dist.sample(self.rng);
            }
        }
        self.names.push(name);
        self.values.push(Arc::new(t));
        self.values.len() - 1
    }
}

/// Allocates and initializes every parameter for `cfg`. Residual output
/// projections start at zero so every decoder block is initially the identity.
pub(crate) fn build(cfg: &PolicyConfig, rng: &mut SimRng) -> (ParamStore, Layout) {
    let d = cfg.d_model;
    let [c1, c2] = cfg.cnn_channels;
    let c_in = cfg.encoder_channels();
    let nv = cfg.visual_tokens();
    let p = cfg.proprio_dim;
    let hidden = cfg.ffn_mult * d;
    let mut b = Builder {
        names: Vec::new(),
        values: Vec::new(),
        rng,
        embed_std: cfg.embed_std,
    };
    let encoder = EncoderLayout {
        conv1: b.add("encoder.conv1".into(), &[c1, c_in, 3, 3], Init::FanIn(c_in * 9)),
        conv2: b.add("encoder.conv2".into(), &[c2, c1, 3, 3], Init::FanIn(c1 * 9)),
        vis_w: b.add(
            "encoder.visual.w".into(),
            &[cfg.cnn_features(), nv * d],
            Init::FanIn(cfg.cnn_features()),
        ),
        vis_b: b.add("encoder.visual.b".into(), &[nv * d], Init::Zeros),
        pro_w1: b.add("encoder.proprio.w1".into(), &[p, d], Init::FanIn(p)),
        pro_b1: b.add("encoder.proprio.b1".into(), &[d], Init::Zeros),
        pro_w2: b.add("encoder.proprio.w2".into(), &[d, d], Init::FanIn(d)),
        pro_b2: b.add("encoder.proprio.b2".into(), &[d], Init::Zeros),
        mask_embedding: b.add("encoder.mask_embedding".into(), &[nv, d], Init::Embed),
        norm: b.add("encoder.norm".into(), &[d], Init::Ones),
    };
    let input_w = b.add("input.w".into(), &[1 + p, d], Init::FanIn(1 + p));
    let input_b = b.add("input.b".into(), &[d], Init::Zeros);
    let joint_pos = b.add("input.joint_pos".into(), &[cfg.n_joints, d], Init::Embed);
    let offsets = cfg.effective_history() + 1;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("decoder.{l}.{s}");
        let ws = cfg
            .variant
            .uses_transition()
            .then(|| b.add(name("cross.ws"), &[d, d], Init::FanIn(d)));
        layers.push(LayerLayout {
            norm_cross: b.add(name("cross.norm"), &[d], Init::Ones),
            wq: b.add(name("cross.wq"), &[d, d], Init::FanIn(d)),
            wk: b.add(name("cross.wk"), &[d, d], Init::FanIn(d)),
            wv: b.add(name("cross.wv"), &[d, d], Init::FanIn(d)),
            ws,
            pos: b.add(name("cross.pos"), &[offsets, d], Init::Embed),
            wo: b.add(name("cross.wo"), &[d, d], Init::Zeros),
            norm_self: b.add(name("self.norm"), &[d], Init::Ones),
            sq: b.add(name("self.wq"), &[d, d], Init::FanIn(d)),
            sk: b.add(name("self.wk"), &[d, d], Init::FanIn(d)),
            sv: b.add(name("self.wv"), &[d, d], Init::FanIn(d)),
            so: b.add(name("self.wo"), &[d, d], Init::Zeros),
            norm_ffn: b.add(name("ffn.norm"), &[d], Init::Ones),
            w1: b.add(name("ffn.w1"), &[d, hidden], Init::FanIn(d)),
            b1: b.add(name("ffn.b1"), &[hidden], Init::Zeros),
            w2: b.add(name("ffn.w2"), &[hidden, d], Init::Zeros),
            b2: b.add(name("ffn.b2"), &[d], Init::Zeros),
        });
    }
    let final_norm = b.add("decoder.final_norm".into(), &[d], Init::Ones);
    let hh = cfg.head_hidden;
    let heads = (0..cfg.n_joints)
        .map(|j| HeadLayout {
            w1: b.add(format!("head.{j}.w1"), &[d, hh], Init::FanIn(d)),
            b1: b.add(format!("head.{j}.b1"), &[hh], Init::Zeros),
            w2: b.add(format!("head.{j}.w2"), &[hh, 1], Init::FanIn(hh)),
            b2: b.add(format!("head.{j}.b2"), &[1], Init::Zeros),
        })
        .collect();
    let store = ParamStore {
        names: b.names,
        values: b.values,
    };
    let layout = Layout {
        encoder,
        input_w,
        input_b,
        joint_pos,
        layers,
        final_norm,
        heads,
    };
    (store, layout)
}

/// Parameter indices of residual output projections.
pub(crate) fn residual_outputs(layout: &Layout) -> Vec<usize> {
    let mut v = vec![];
    for l in &layout.layers {
        v.extend([l.wo, l.so, l.w2, l.b2]);
    }
    v
}

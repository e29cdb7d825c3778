use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Projections of one timestep, full width (`d_model` columns, heads side by
/// side).
#[derive(Debug, Clone)]
pub struct TokenBlock {
    pub timestep: usize,
    /// Decoder queries, `m x d_model`.
    pub q: Tensor,
    /// State-token keys, values and transition projections, `n x d_model`.
    /// Blocks without `s` (standard cross-attention) skip the affinity.
    pub k: Tensor,
    pub v: Tensor,
    pub s: Option<Tensor>,
}

/// A cached timestep: per-head projections plus the same-time affinity
/// `A_τ = Q_τ K_τᵀ`, computed once when the step was current. `s` and
/// `affinity` are empty for blocks pushed without a transition projection.
#[derive(Debug, Clone)]
pub struct CachedBlock {
    pub timestep: usize,
    pub k: Vec<Arc<Tensor>>,
    pub v: Vec<Arc<Tensor>>,
    pub s: Vec<Arc<Tensor>>,
    pub affinity: Vec<Arc<Tensor>>,
}

fn split_heads(x: &Tensor, n_heads: usize) -> Vec<Arc<Tensor>> {
    let (rows, cols) = (x.rows(), x.cols());
    let dh = cols / n_heads;
    (0..n_heads)
        .map(|h| {
            let mut data = Vec::with_capacity(rows * dh);
            for r in 0..rows {
                data.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
            }
            Arc::new(Tensor::matrix(rows, dh, data).expect("head slice"))
        })
        .collect()
}

/// Ring buffer of the last `max_history + 1` timesteps.
#[derive(Debug, Clone)]
pub struct HistoryCache {
    capacity: usize,
    n_heads: usize,
    blocks: VecDeque<CachedBlock>,
    token_counts: Option<(usize, usize)>,
    macs: u64,
}

impl HistoryCache {
    pub fn new(max_history: usize, n_heads: usize) -> Self {
        HistoryCache {
            capacity: max_history + 1,
            n_heads,
            blocks: VecDeque::with_capacity(max_history + 1),
            token_counts: None,
            macs: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn last_timestep(&self) -> Option<usize> {
        self.blocks.back().map(|b| b.timestep)
    }

    /// Multiply-accumulates spent computing affinities so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn clear(&mut self) {
        self.blocks.clear();
        self.token_counts = None;
    }

    /// Oldest first; the current step is last.
    pub fn window(&self) -> impl ExactSizeIterator<Item = &CachedBlock> {
        self.blocks.iter()
    }

    pub fn get(&self, i: usize) -> Option<&CachedBlock> {
        self.blocks.get(i)
    }

    pub fn push(&mut self, block: TokenBlock) -> Result<()> {
        if let Some(last) = self.last_timestep() {
            if block.timestep != last + 1 {
                return Err(Error::Sequencing {
                    expected: last + 1,
                    got: block.timestep,
                });
            }
        }
        let cols = block.q.cols();
        if block.k.cols() != cols || !cols.is_multiple_of(self.n_heads) || block.k.shape() != block.v.shape() {
            return Err(Error::dim("cache_push", block.q.shape(), block.k.shape()));
        }
        if let Some(s) = &block.s {
            if s.shape() != block.k.shape() {
                return Err(Error::dim("cache_push", block.k.shape(), s.shape()));
            }
        }
        let counts = (block.q.rows(), block.k.rows());
        if let Some((m, n)) = self.token_counts {
            if counts != (m, n) {
                return Err(Error::dim("cache_push", &[m, n], &[counts.0, counts.1]));
            }
        }
        let q = split_heads(&block.q, self.n_heads);
        let k = split_heads(&block.k, self.n_heads);
        let affinity = if block.s.is_some() {
            q.iter()
                .zip(&k)
                .map(|(qh, kh)| {
                    let (m, dh, n) = (qh.rows(), qh.cols(), kh.rows());
                    self.macs += (m * dh * n) as u64;
                    let a = kernels::matmul_nt(qh.data(), kh.data(), m, dh, n);
                    Arc::new(Tensor::matrix(m, n, a).expect("affinity shape"))
                })
                .collect()
        } else {
            Vec::new()
        };
        let cached = CachedBlock {
            timestep: block.timestep,
            v: split_heads(&block.v, self.n_heads),
            s: block.s.as_ref().map_or_else(Vec::new, |s| split_heads(s, self.n_heads)),
            k,
            affinity,
        };
        if self.blocks.len() == self.capacity {
            self.blocks.pop_front();
        }
        self.blocks.push_back(cached);
        self.token_counts = Some(counts);
        Ok(())
    }
}

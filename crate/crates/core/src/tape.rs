//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation in execution order, which is already a
//! topological order. [`Tape::backward`] walks it once in reverse and
//! accumulates gradients into the leaves that asked for them.

use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Sum(usize),
    Gelu(usize),
    Softmax(usize),
    RmsNorm { x: usize, gain: usize, inv: Vec<f64> },
    Conv2d { input: usize, kernels: usize, geom: ConvGeom },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, rows: Vec<usize> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation counters used by instrumentation and benchmarks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Multiply-accumulates performed by matrix products.
    pub macs: u64,
    /// Number of softmax rows evaluated.
    pub softmax_rows: u64,
    pub min_softmax_width: Option<usize>,
    pub max_softmax_width: Option<usize>,
}

impl TapeStats {
    fn record_softmax(&mut self, rows: usize, width: usize) {
        self.softmax_rows += rows as u64;
        self.min_softmax_width = Some(self.min_softmax_width.map_or(width, |w| w.min(width)));
        self.max_softmax_width = Some(self.max_softmax_width.map_or(width, |w| w.max(width)));
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    stats: TapeStats,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            grad_enabled: true,
            stats: TapeStats::default(),
        }
    }

    /// A tape on which no node ever requires a gradient.
    pub fn inference() -> Self {
        let mut t = Tape::new();
        t.grad_enabled = false;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = TapeStats::default();
    }

    fn idx(&self, v: Var) -> usize {
        debug_assert_eq!(v.tape, self.id, "variable from another tape");
        v.index
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        self.leaf_grads.push(None);
        Var { tape: self.id, index }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a shared value without copying it.
    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_shared(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[self.idx(v)].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf, if it received any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[self.idx(v)].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a);
        let (q2, r) = self.dims2(b);
        if q != q2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), p, q, r);
        self.stats.macs += (p * q * r) as u64;
        let (ia, ib) = (self.idx(a), self.idx(b));
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::MatMul(ia, ib), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a);
        let (r, q2) = self.dims2(b);
        if q != q2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), p, q, r);
        self.stats.macs += (p * q * r) as u64;
        let (ia, ib) = (self.idx(a), self.idx(b));
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::MatMulNt(ia, ib), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let (ia, ib) = (self.idx(a), self.idx(b));
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(Tensor::new(shape, data)?, op(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let ia = self.idx(a);
        let ng = self.needs(ia);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Scale(ia, c), ng)
    }

    /// Adds a length-`d` row vector to every row of a `rows x d` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let d = ta.cols();
        if tb.numel() != d {
            return Err(Error::dim("add_row", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .chunks(d)
            .flat_map(|r| r.iter().zip(tb.data()).map(|(x, y)| x + y))
            .collect();
        let shape = ta.shape().to_vec();
        let (ia, ib) = (self.idx(a), self.idx(bias));
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(ia, ib), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ia = self.idx(a);
        let ng = self.needs(ia);
        self.push(Tensor::scalar(s), Op::Sum(ia), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = t.shape().to_vec();
        let ia = self.idx(a);
        let ng = self.needs(ia);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Gelu(ia), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row softmax restricted to entries whose mask bit is set; hidden
    /// entries get weight exactly zero and their inputs are never read.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim("softmax_rows_masked", self.shape(x), &[mask.len()]));
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if self.shape(x).len() != 2 {
            return Err(Error::dim("softmax_rows", self.shape(x), &[rows, cols]));
        }
        let y = kernels::softmax_rows(self.value(x).data(), rows, cols, mask);
        match mask {
            None => self.stats.record_softmax(rows, cols),
            Some(m) => {
                for r in 0..rows {
                    let w = m[r * cols..(r + 1) * cols].iter().filter(|b| **b).count();
                    self.stats.record_softmax(1, w);
                }
            }
        }
        let ix = self.idx(x);
        let ng = self.needs(ix);
        Ok(self.push(Tensor::new(vec![rows, cols], y)?, Op::Softmax(ix), ng))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x);
        if self.value(gain).numel() != d {
            return Err(Error::dim("rmsnorm", self.shape(x), self.shape(gain)));
        }
        let (y, inv) = kernels::rmsnorm(self.value(x).data(), self.value(gain).data(), rows, d);
        let shape = self.shape(x).to_vec();
        let (ix, ig) = (self.idx(x), self.idx(gain));
        let ng = self.needs(ix) || self.needs(ig);
        Ok(self.push(Tensor::new(shape, y)?, Op::RmsNorm { x: ix, gain: ig, inv }, ng))
    }

    /// 3x3 zero-padded cross-correlation of a `c_in x h x w` input.
    pub fn conv2d(&mut self, input: Var, kernels_v: Var, stride: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernels_v).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || sk[1] != si[0] {
            return Err(Error::dim("conv2d", &si, &sk));
        }
        if !(stride == 1 || stride == 2) || si[1] < 3 || si[2] < 3 {
            return Err(Error::usage("conv2d needs stride 1 or 2 and spatial extent >= 3"));
        }
        let geom = ConvGeom {
            c_in: si[0],
            h: si[1],
            w: si[2],
            c_out: sk[0],
            stride,
        };
        let out = kernels::conv2d(self.value(input).data(), self.value(kernels_v).data(), geom);
        let (ii, ik) = (self.idx(input), self.idx(kernels_v));
        let ng = self.needs(ii) || self.needs(ik);
        let shape = vec![geom.c_out, geom.out_h(), geom.out_w()];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { input: ii, kernels: ik, geom }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if len == 0 || start + len > rows {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let ix = self.idx(x);
        let ng = self.needs(ix);
        Ok(self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows { x: ix, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if len == 0 || start + len > cols {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ix = self.idx(x);
        let ng = self.needs(ix);
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { x: ix, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::usage("concat_rows of nothing"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let ng = idx.iter().any(|&i| self.needs(i));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::usage("concat_cols of nothing"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim("concat_cols", self.shape(first), t.shape()));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let ng = idx.iter().any(|&i| self.needs(i));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(idx), ng))
    }

    /// Selects rows by index (repeats allowed); the backward rule scatter-adds.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::dim("gather_rows", self.shape(x), &[rows.len()]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let ix = self.idx(x);
        let ng = self.needs(ix);
        let op = Op::GatherRows { x: ix, rows: rows.to_vec() };
        Ok(self.push(Tensor::new(vec![rows.len(), cols], data)?, op, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(x)).clone().reshaped(shape.to_vec())?;
        let ix = self.idx(x);
        let ng = self.needs(ix);
        Ok(self.push(t, Op::Reshape(ix), ng))
    }

    // ---- backward ----

    /// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
    /// Calling it again without [`Tape::zero_grad`] adds to the stored values.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::usage("loss was not recorded on this tape"));
        }
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(Error::usage(
                "backward needs a scalar loss, got shape ".to_string()
                    + &alloc::format!("{:?}", self.nodes[loss.index].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |j: usize, d: Vec<f64>| {
            if !nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(d) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {
                match &mut self.leaf_grads[i] {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            &Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
                if nodes[a].needs_grad {
                    acc(a, kernels::matmul_nt(&g, tb.data(), p, r, q));
                }
                if nodes[b].needs_grad {
                    acc(b, kernels::matmul_tn(ta.data(), &g, p, q, r));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                let (p, q, r) = (ta.rows(), ta.cols(), tb.rows());
                if nodes[a].needs_grad {
                    acc(a, kernels::matmul(&g, tb.data(), p, r, q));
                }
                if nodes[b].needs_grad {
                    acc(b, kernels::matmul_tn(&g, ta.data(), p, r, q));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g);
            }
            &Op::Sub(a, b) => {
                acc(b, g.iter().map(|x| -x).collect());
                acc(a, g);
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                if nodes[a].needs_grad {
                    acc(a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                }
                if nodes[b].needs_grad {
                    acc(b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(a, c) => acc(a, g.iter().map(|x| x * c).collect()),
            &Op::AddRow(a, b) => {
                let d = nodes[b].value.numel();
                if nodes[b].needs_grad {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (s, v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(b, db);
                }
                acc(a, g);
            }
            &Op::Sum(a) => {
                let n = nodes[a].value.numel();
                acc(a, vec![g[0]; n]);
            }
            &Op::Gelu(a) => {
                let x = nodes[a].value.data();
                acc(a, g.iter().zip(x).map(|(d, &v)| d * kernels::gelu_grad(v)).collect());
            }
            &Op::Softmax(a) => {
                let (rows, cols) = (out.rows(), out.cols());
                acc(a, kernels::softmax_rows_backward(out.data(), &g, rows, cols));
            }
            Op::RmsNorm { x, gain, inv } => {
                let (tx, tg) = (&nodes[*x].value, &nodes[*gain].value);
                let (dx, dg) = kernels::rmsnorm_backward(
                    tx.data(),
                    tg.data(),
                    inv,
                    &g,
                    tx.rows(),
                    tx.cols(),
                );
                acc(*gain, dg);
                acc(*x, dx);
            }
            &Op::Conv2d { input, kernels: k, geom } => {
                let (din, dk) = kernels::conv2d_backward(
                    nodes[input].value.data(),
                    nodes[k].value.data(),
                    &g,
                    geom,
                );
                acc(k, dk);
                acc(input, din);
            }
            &Op::SliceRows { x, start } => {
                let tx = &nodes[x].value;
                let cols = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                d[start * cols..start * cols + g.len()].copy_from_slice(&g);
                acc(x, d);
            }
            &Op::SliceCols { x, start } => {
                let tx = &nodes[x].value;
                let (rows, cols) = (tx.rows(), tx.cols());
                let len = out.cols();
                let mut d = vec![0.0; tx.numel()];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + col..r * total + col + c]);
                    }
                    acc(p, d);
                    col += c;
                }
            }
            Op::GatherRows { x, rows } => {
                let tx = &nodes[*x].value;
                let cols = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] += g[k * cols + c];
                    }
                }
                acc(*x, d);
            }
            &Op::Reshape(x) => acc(x, g),
        }
    }
}

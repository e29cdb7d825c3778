//! Raw `f64` kernels shared by the tape's forward and backward rules.
//!
//! Every reduction runs in ascending index order, so two calls on the same
//! operands produce identical bits regardless of how many rows surround them.

use alloc::vec;
use alloc::vec::Vec;

pub const RMS_EPS: f64 = 1e-6;

/// `c[p x r] = a[p x q] * b[q x r]`.
pub fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * r..(k + 1) * r];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// Dot product with four interleaved partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `c[p x r] = a[p x q] * b[r x q]^T`.
pub fn matmul_nt(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            c[i * r + j] = dot(arow, &b[j * q..(j + 1) * q]);
        }
    }
    c
}

/// `c[p x r] = a[q x p]^T * b[q x r]`.
pub fn matmul_tn(a: &[f64], b: &[f64], q: usize, p: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for k in 0..q {
        let arow = &a[k * p..(k + 1) * p];
        let brow = &b[k * r..(k + 1) * r];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let crow = &mut c[i * r..(i + 1) * r];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aki * bj;
            }
        }
    }
    c
}

/// Row softmax with per-row max subtraction. Entries whose mask bit is
/// `false` are excluded from the row and receive weight exactly zero.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let yr = &mut y[i * cols..(i + 1) * cols];
        let visible = |j: usize| mask.is_none_or(|m| m[i * cols + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if visible(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (j, &v) in xr.iter().enumerate() {
            if visible(j) {
                let e = libm::exp(v - max);
                yr[j] = e;
                sum += e;
            }
        }
        for v in yr.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Softmax vector-Jacobian product: `dx = y * (dy - <dy, y>)` per row.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for i in 0..rows {
        let range = i * cols..(i + 1) * cols;
        let yr = &y[range.clone()];
        let dyr = &dy[range.clone()];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx[range].iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Returns the normalized output and the per-row reciprocal RMS.
pub fn rmsnorm(x: &[f64], gain: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / libm::sqrt(ms + RMS_EPS);
        inv[i] = r;
        for ((yj, &xj), &g) in y[i * d..(i + 1) * d].iter_mut().zip(xr).zip(gain) {
            *yj = xj * r * g;
        }
    }
    (y, inv)
}

/// Gradients of [`rmsnorm`] with respect to input and gain.
pub fn rmsnorm_backward(
    x: &[f64],
    gain: &[f64],
    inv: &[f64],
    dy: &[f64],
    rows: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * d];
    let mut dg = vec![0.0; d];
    for i in 0..rows {
        let r = inv[i];
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut dot = 0.0;
        for j in 0..d {
            let xhat = xr[j] * r;
            dg[j] += dyr[j] * xhat;
            dot += dyr[j] * gain[j] * xhat;
        }
        let mean = dot / d as f64;
        for j in 0..d {
            let xhat = xr[j] * r;
            dx[i * d + j] = r * (dyr[j] * gain[j] - xhat * mean);
        }
    }
    (dx, dg)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Geometry of a 3x3, zero-padded cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        // f(out_y, out_x, in_y, in_x, kernel_y, kernel_x)
        for oy in 0..self.out_h() {
            for ox in 0..self.out_w() {
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(oy, ox, iy as usize, ix as usize, ky, kx);
                    }
                }
            }
        }
    }
}

pub fn conv2d(input: &[f64], kernels: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.c_out * oh * ow];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let kbase = (co * g.c_in + ci) * 9;
            let ibase = ci * g.h * g.w;
            let obase = co * oh * ow;
            g.for_each_tap(|oy, ox, iy, ix, ky, kx| {
                let x = input[ibase + iy * g.w + ix];
                if x != 0.0 {
                    out[obase + oy * ow + ox] += kernels[kbase + ky * 3 + kx] * x;
                }
            });
        }
    }
    out
}

/// Returns `(d_input, d_kernels)`.
pub fn conv2d_backward(
    input: &[f64],
    kernels: &[f64],
    dout: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut din = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernels.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let kbase = (co * g.c_in + ci) * 9;
            let ibase = ci * g.h * g.w;
            let obase = co * oh * ow;
            g.for_each_tap(|oy, ox, iy, ix, ky, kx| {
                let go = dout[obase + oy * ow + ox];
                dk[kbase + ky * 3 + kx] += go * input[ibase + iy * g.w + ix];
                din[ibase + iy * g.w + ix] += go * kernels[kbase + ky * 3 + kx];
            });
        }
    }
    (din, dk)
}

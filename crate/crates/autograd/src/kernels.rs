//! Slice-level kernels shared by the forward and backward passes.

use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::{numel, strides, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention-style masking applied before a last-axis softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Viewing the input as `[.., q, k]`, query row `i` may see keys `j <= i + offset`.
    Causal { offset: usize },
}

impl Mask {
    #[inline]
    pub fn allowed(&self, q_index: usize, k: usize) -> usize {
        match *self {
            Mask::None => k,
            Mask::Causal { offset } => (q_index + offset + 1).min(k),
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when read as a broadcast of `out_shape` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let mut s = vec![0; rank];
    for i in 0..shape.len() {
        let oi = rank - shape.len() + i;
        s[oi] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let n_last = out_shape[last];
    let (la, lb) = (sa[last], sb[last]);
    let mut o = 0;
    loop {
        let mut oa: usize = 0;
        let mut ob: usize = 0;
        for d in 0..last {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..n_last {
            f(o, oa + j * la, ob + j * lb);
            o += 1;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return Tensor::new(&out_shape, ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect());
    }
    if a.shape() == out_shape.as_slice() && out_shape.ends_with(b.shape()) && !bd.is_empty() {
        let n = bd.len();
        let data = ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect();
        return Tensor::new(&out_shape, data);
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![S::zero(); numel(&out_shape)];
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out_shape, data)
}

/// Sums `g` (shaped like a broadcast result) back down to `shape`.
pub fn reduce_to<S: Scalar>(g: Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g;
    }
    let out_shape = g.shape().to_vec();
    let gd = g.data();
    let mut data = vec![S::zero(); numel(shape)];
    if out_shape.ends_with(shape) && !data.is_empty() {
        let n = data.len();
        for (i, &v) in gd.iter().enumerate() {
            data[i % n] += v;
        }
        return Tensor::new(shape, data);
    }
    let st = broadcast_strides(shape, &out_shape);
    let zero = vec![0; out_shape.len()];
    for_each_broadcast(&out_shape, &st, &zero, |o, it, _| data[it] += gd[o]);
    Tensor::new(shape, data)
}

/// Elementwise product of `g` with `b` broadcast to `g`'s shape.
pub fn mul_broadcast<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    broadcast_binary(g, b, f)
}

/// Elementwise `f(g, a, b)` where `a` and `b` broadcast to `g`'s shape.
pub fn ternary_broadcast<S: Scalar>(
    g: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S, S) -> S,
) -> Tensor<S> {
    let out_shape = g.shape();
    let (gd, ad, bd) = (g.data(), a.data(), b.data());
    if a.shape() == out_shape && b.shape() == out_shape {
        return Tensor::new(out_shape, (0..gd.len()).map(|i| f(gd[i], ad[i], bd[i])).collect());
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut data = vec![S::zero(); gd.len()];
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| data[o] = f(gd[o], ad[ia], bd[ib]));
    Tensor::new(out_shape, data)
}

pub fn softmax_rows<S: Scalar>(x: &[S], cols: usize, q_len: usize, mask: Mask) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (r, (row, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let allowed = mask.allowed(r % q_len.max(1), cols);
        if allowed == 0 {
            continue;
        }
        let m = row[..allowed].iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for j in 0..allowed {
            let e = (row[j] - m).exp();
            orow[j] = e;
            sum += e;
        }
        let inv = S::one() / sum;
        for v in orow[..allowed].iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn softmax_rows_backward<S: Scalar>(y: &[S], gy: &[S], cols: usize) -> Vec<S> {
    let mut gx = vec![S::zero(); y.len()];
    for ((yr, gr), xr) in y.chunks(cols).zip(gy.chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..cols {
            xr[j] = yr[j] * (gr[j] - dot);
        }
    }
    gx
}

/// Returns `(y, xhat, rstd)` for layer norm over rows of width `d`.
pub fn layer_norm<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], d: usize) -> (Vec<S>, Vec<S>, Vec<S>) {
    let eps = S::from_f64(LAYER_NORM_EPS);
    let rows = x.len() / d;
    let inv_d = S::one() / S::from_f64(d as f64);
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Input gradient of layer norm given `g = dL/dy * gamma`.
pub fn layer_norm_backward_input<S: Scalar>(g: &[S], xhat: &[S], rstd: &[S], d: usize) -> Vec<S> {
    let inv_d = S::one() / S::from_f64(d as f64);
    let mut gx = vec![S::zero(); g.len()];
    for r in 0..rstd.len() {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mean_g = gr.iter().copied().sum::<S>() * inv_d;
        let mean_gh = gr.iter().zip(hr).map(|(&a, &b)| a * b).sum::<S>() * inv_d;
        for j in 0..d {
            gx[r * d + j] = rstd[r] * (gr[j] - mean_g - hr[j] * mean_gh);
        }
    }
    gx
}

/// Geometry of an NHWC convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds NHWC input into `[B*Ho*Wo, kh*kw*Cin]` patch rows ordered `(ky, kx, c)`.
pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let (ho, wo, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let mut cols = vec![S::zero(); g.out_positions() * pl];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let dst = row + (ky * g.kw + kx) * g.c_in;
                        cols[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into an NHWC buffer.
pub fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom) -> Vec<S> {
    let (ho, wo, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let mut x = vec![S::zero(); g.batch * g.h * g.w * g.c_in];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let src = row + (ky * g.kw + kx) * g.c_in;
                        for c in 0..g.c_in {
                            x[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `cols[P, K] x w[K, Cout]`.
pub fn conv_forward<S: Scalar>(cols: &[S], w: &[S], g: &ConvGeom) -> Vec<S> {
    let p = g.out_positions();
    let mut out = vec![S::zero(); p * g.c_out];
    gemm(
        cols,
        MatLayout::new(p, g.patch_len(), false),
        w,
        MatLayout::new(g.patch_len(), g.c_out, false),
        &mut out,
        S::zero(),
    );
    out
}

pub fn upsample2x<S: Scalar>(x: &[S], b: usize, h: usize, w: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); b * 4 * h * w * c];
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((bi * h + y / 2) * w + xx / 2) * c;
                let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2x_backward<S: Scalar>(g: &[S], b: usize, h: usize, w: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                let src = ((bi * 2 * h + y) * 2 * w + xx) * c;
                for k in 0..c {
                    out[dst + k] += g[src + k];
                }
            }
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let k = S::from_f64(GELU_K);
    let c = S::from_f64(GELU_C);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let k = S::from_f64(GELU_K);
    let c = S::from_f64(GELU_C);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (S::one() + three * c * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

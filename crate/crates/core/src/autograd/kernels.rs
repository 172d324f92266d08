//! Raw forward and backward loops over flat slices.

use crate::tensor::Real;

/// Batched `[b, m, k] · [b, k, n]` product.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let out = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    out
}

/// Swaps the last two axes of a `[b, r, c]` buffer.
pub(crate) fn transpose<T: Real>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let base = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}

/// Geometry of an NHWC convolution with a `[k, k, c_in, c_out]` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Input row/column feeding output `o` at kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < limit)
    }
}

pub(crate) fn conv2d<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_h * g.out_w * g.c_out];
    for n in 0..g.n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((n * g.out_h + oy) * g.out_w + ox) * g.c_out;
                let orow = &mut out[o..o + g.c_out];
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xi = ((n * g.h + iy) * g.w + ix) * g.c_in;
                        for ci in 0..g.c_in {
                            let xv = x[xi + ci];
                            let wi = ((ky * g.k + kx) * g.c_in + ci) * g.c_out;
                            for (acc, &wv) in orow.iter_mut().zip(&w[wi..wi + g.c_out]) {
                                *acc = *acc + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d input, d kernel)` for an upstream gradient `gy`.
pub(crate) fn conv2d_backward<T: Real>(x: &[T], w: &[T], gy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for n in 0..g.n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((n * g.out_h + oy) * g.out_w + ox) * g.c_out;
                let grow = &gy[o..o + g.c_out];
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xi = ((n * g.h + iy) * g.w + ix) * g.c_in;
                        for ci in 0..g.c_in {
                            let wi = ((ky * g.k + kx) * g.c_in + ci) * g.c_out;
                            let xv = x[xi + ci];
                            let mut acc = T::zero();
                            for ((&gv, &wv), gwv) in grow.iter().zip(&w[wi..wi + g.c_out]).zip(&mut gw[wi..wi + g.c_out]) {
                                acc = acc + gv * wv;
                                *gwv = *gwv + xv * gv;
                            }
                            gx[xi + ci] = gx[xi + ci] + acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(x[at(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], gy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * gy[at(j)]).sum();
            for j in 0..len {
                gx[at(j)] = y[at(j)] * (gy[at(j)] - dot);
            }
        }
    }
    gx
}

/// Normalizes each row of a `[rows, c]` buffer. Returns `(y, x_hat, rstd)`.
pub(crate) fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let rows = x.len() / c;
    let cf = T::lit(c as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(d x, d gamma, d beta)`.
pub(crate) fn layer_norm_backward<T: Real>(
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let cf = T::lit(c as f64);
    let mut gx = vec![T::zero(); xhat.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for (r, &rs) in rstd.iter().enumerate() {
        let h = &xhat[r * c..(r + 1) * c];
        let g = &gy[r * c..(r + 1) * c];
        let mut sum_d = T::zero();
        let mut sum_dh = T::zero();
        for j in 0..c {
            let d = g[j] * gamma[j];
            sum_d = sum_d + d;
            sum_dh = sum_dh + d * h[j];
            gg[j] = gg[j] + g[j] * h[j];
            gb[j] = gb[j] + g[j];
        }
        for j in 0..c {
            let d = g[j] * gamma[j];
            gx[r * c + j] = rs * (d - sum_d / cf - h[j] * sum_dh / cf);
        }
    }
    (gx, gg, gb)
}

/// Per-channel mean and biased variance over all leading positions of a
/// channel-last buffer.
pub(crate) fn channel_moments<T: Real>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let rf = T::lit(rows as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / rf);
    let mut var = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = *s / rf);
    (mean, var)
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let u = c * (x + a * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// `(sqrt(2/pi), 0.044715)` of the tanh approximation.
fn gelu_consts<T: Real>() -> (T, T) {
    (T::lit(0.797_884_560_802_865_4), T::lit(0.044_715))
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

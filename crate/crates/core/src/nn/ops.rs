//! Per-layer kernels. Batched tensors are `(N, C, H, W)`; weight gradients are
//! reduced over fixed-size sample chunks in chunk order, so results do not
//! depend on how many threads ran the chunks.

use super::{Scalar, Tensor};
use crate::par::{for_each_chunk_mut, map_indices, Parallelism};

/// Samples per unit of parallel work.
pub(crate) const CHUNK: usize = 8;

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input pixel read by kernel tap `(ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] =
                            g.source(oy, ox, ky, kx).map_or(T::zero(), |i| plane[i]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some(i) = g.source(oy, ox, ky, kx) {
                            plane[i] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution `y = W * x + b` with `W: (cout, cin, kh, kw)`.
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    par: Parallelism,
) -> Tensor<T> {
    let n = x.batch();
    let (rows, cols) = (g.rows(), g.cols());
    let mut y = Tensor::zeros([n, cout, g.oh, g.ow]);
    let per = cout * cols;
    for_each_chunk_mut(par, y.data_mut(), per * CHUNK, |chunk, out| {
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * cols]
        };
        for (i, yo) in out.chunks_mut(per).enumerate() {
            let xs = x.sample(chunk * CHUNK + i);
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            for (co, row) in yo.chunks_mut(cols).enumerate() {
                row.fill(bias[co]);
            }
            T::gemm(
                cout,
                rows,
                cols,
                T::one(),
                weight,
                (rows as isize, 1),
                b,
                (cols as isize, 1),
                T::one(),
                yo,
                (cols as isize, 1),
            );
        }
    });
    y
}

/// Gradients of [`conv_forward`]: `(dW, db, dx)`; `dx` only when requested.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    need_dx: bool,
    par: Parallelism,
) -> (Vec<T>, Vec<T>, Option<Tensor<T>>) {
    let n = x.batch();
    let cout = dy.channels();
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = x.sample_len();
    let chunks = n.div_ceil(CHUNK);
    let partials = map_indices(par, chunks, |chunk| {
        let mut dw = vec![T::zero(); cout * rows];
        let mut db = vec![T::zero(); cout];
        let lo = chunk * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let mut dx = if need_dx {
            vec![T::zero(); (hi - lo) * in_len]
        } else {
            Vec::new()
        };
        let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
        let mut dcol = vec![T::zero(); if need_dx { rows * cols } else { 0 }];
        for s in lo..hi {
            let dys = dy.sample(s);
            for (co, row) in dys.chunks(cols).enumerate() {
                db[co] += row.iter().copied().sum();
            }
            let xs = x.sample(s);
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            // dW += dy_s (cout x cols) * col^T (cols x rows)
            T::gemm(
                cout,
                cols,
                rows,
                T::one(),
                dys,
                (cols as isize, 1),
                b,
                (1, cols as isize),
                T::one(),
                &mut dw,
                (rows as isize, 1),
            );
            if need_dx {
                // dcol = W^T (rows x cout) * dy_s (cout x cols)
                T::gemm(
                    rows,
                    cout,
                    cols,
                    T::one(),
                    weight,
                    (1, rows as isize),
                    dys,
                    (cols as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (cols as isize, 1),
                );
                let dxs = &mut dx[(s - lo) * in_len..(s - lo + 1) * in_len];
                if g.is_pointwise() {
                    dxs.copy_from_slice(&dcol);
                } else {
                    col2im(g, &dcol, dxs);
                }
            }
        }
        (dw, db, dx)
    });
    let mut dw = vec![T::zero(); cout * rows];
    let mut db = vec![T::zero(); cout];
    let mut dx = Vec::with_capacity(if need_dx { n * in_len } else { 0 });
    for (pw, pb, px) in partials {
        add_into(&mut dw, &pw);
        add_into(&mut db, &pb);
        dx.extend(px);
    }
    let dx = need_dx.then(|| Tensor::from_vec(x.shape(), dx).expect("dx covers the batch"));
    (dw, db, dx)
}

pub(crate) fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Depthwise convolution with `W: (c, k, k)`, no bias.
pub(crate) fn depthwise_forward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &[T],
    par: Parallelism,
) -> Tensor<T> {
    let n = x.batch();
    let mut y = Tensor::zeros([n, g.cin, g.oh, g.ow]);
    let per = g.cin * g.cols();
    for_each_chunk_mut(par, y.data_mut(), per, |s, out| {
        let xs = x.sample(s);
        for c in 0..g.cin {
            let plane = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
            let k = &weight[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let o = &mut out[c * g.cols()..(c + 1) * g.cols()];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some(i) = g.source(oy, ox, ky, kx) {
                                acc += k[ky * g.kw + kx] * plane[i];
                            }
                        }
                    }
                    o[oy * g.ow + ox] = acc;
                }
            }
        }
    });
    y
}

pub(crate) fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    need_dx: bool,
    par: Parallelism,
) -> (Vec<T>, Option<Tensor<T>>) {
    let n = x.batch();
    let taps = g.kh * g.kw;
    let in_len = x.sample_len();
    let partials = map_indices(par, n.div_ceil(CHUNK), |chunk| {
        let lo = chunk * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let mut dw = vec![T::zero(); g.cin * taps];
        let mut dx = vec![T::zero(); if need_dx { (hi - lo) * in_len } else { 0 }];
        for s in lo..hi {
            let xs = x.sample(s);
            let dys = dy.sample(s);
            for c in 0..g.cin {
                let plane = c * g.h * g.w;
                let d = &dys[c * g.cols()..(c + 1) * g.cols()];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let gy = d[oy * g.ow + ox];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some(i) = g.source(oy, ox, ky, kx) {
                                    dw[c * taps + ky * g.kw + kx] += gy * xs[plane + i];
                                    if need_dx {
                                        dx[(s - lo) * in_len + plane + i] +=
                                            gy * weight[c * taps + ky * g.kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (dw, dx)
    });
    let mut dw = vec![T::zero(); g.cin * taps];
    let mut dx = Vec::new();
    for (pw, px) in partials {
        add_into(&mut dw, &pw);
        dx.extend(px);
    }
    let dx = need_dx.then(|| Tensor::from_vec(x.shape(), dx).expect("dx covers the batch"));
    (dw, dx)
}

/// Batch-norm intermediates needed by the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    /// Whether batch statistics (rather than running ones) normalised `xhat`.
    pub batch_stats: bool,
}

/// Per-channel mean and biased variance over batch and space.
fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, hw) = (x.batch(), x.channels(), x.spatial());
    let count = T::from_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * hw;
            s += x.data()[base..base + hw].iter().copied().sum();
        }
        let m = s / count;
        let mut v = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * hw;
            v += x.data()[base..base + hw]
                .iter()
                .map(|&a| (a - m) * (a - m))
                .sum();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// `z = gamma * (x - mu) / sqrt(var + eps) + beta`, in place.
pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &mut Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> BnCache<T> {
    let (n, c, hw) = (x.batch(), x.channels(), x.spatial());
    let (mean, var, batch_stats) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), false),
        None => {
            let (m, v) = channel_moments(x);
            (m, v, true)
        }
    };
    let eps = T::from_f64(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let xs = &mut xhat.data_mut()[base..base + hw];
            for a in xs.iter_mut() {
                *a = (*a - mean[ch]) * inv_std[ch];
            }
            let zs = &mut x.data_mut()[base..base + hw];
            for (z, &h) in zs.iter_mut().zip(&xhat.data()[base..base + hw]) {
                *z = gamma[ch] * h + beta[ch];
            }
        }
    }
    BnCache {
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
        batch_stats,
    }
}

/// Returns `(du, dgamma, dbeta)` given `dz`.
pub(crate) fn batch_norm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    dz: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = (dz.batch(), dz.channels(), dz.spatial());
    let count = T::from_f64((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let d = &dz.data()[base..base + hw];
            let h = &cache.xhat.data()[base..base + hw];
            dbeta[ch] += d.iter().copied().sum();
            dgamma[ch] += d.iter().zip(h).map(|(&a, &b)| a * b).sum();
        }
    }
    let mut du = dz.clone();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            let h = &cache.xhat.data()[base..base + hw];
            let out = &mut du.data_mut()[base..base + hw];
            for (o, &hv) in out.iter_mut().zip(h) {
                *o = if cache.batch_stats {
                    scale * (*o - dbeta[ch] / count - hv * dgamma[ch] / count)
                } else {
                    scale * *o
                };
            }
        }
    }
    (du, dgamma, dbeta)
}

pub(crate) fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let xs = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (T::neg_infinity(), 0);
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (oy * stride + ky) * w + ox * stride + kx;
                        if xs[i] > best.0 {
                            best = (xs[i], i);
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                y.data_mut()[o] = best.0;
                arg[o] = best.1 as u32;
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool_backward<T: Scalar>(
    in_shape: [usize; 4],
    arg: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let plane_in = in_shape[2] * in_shape[3];
    let plane_out = dy.spatial();
    for (o, (&g, &a)) in dy.data().iter().zip(arg).enumerate() {
        let plane = o / plane_out;
        dx.data_mut()[plane * plane_in + a as usize] += g;
    }
    dx
}

pub(crate) fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let hw = x.spatial();
    let inv = T::one() / T::from_f64(hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("one value per plane")
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(
    in_shape: [usize; 4],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let hw = in_shape[2] * in_shape[3];
    let inv = T::one() / T::from_f64(hw as f64);
    let mut dx = Tensor::zeros(in_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.fill(g * inv);
    }
    dx
}

/// `y = x W^T + b` with `x: (N, F)`, `W: (U, F)`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    units: usize,
) -> Tensor<T> {
    let n = x.batch();
    let f = x.sample_len();
    let mut y = Tensor::zeros([n, units, 1, 1]);
    for row in y.data_mut().chunks_mut(units) {
        row.copy_from_slice(bias);
    }
    T::gemm(
        n,
        f,
        units,
        T::one(),
        x.data(),
        (f as isize, 1),
        weight,
        (1, f as isize),
        T::one(),
        y.data_mut(),
        (units as isize, 1),
    );
    y
}

/// Returns `(dW, db, dx)`.
pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
) -> (Vec<T>, Vec<T>, Tensor<T>) {
    let n = x.batch();
    let f = x.sample_len();
    let u = dy.sample_len();
    let mut dw = vec![T::zero(); u * f];
    T::gemm(
        u,
        n,
        f,
        T::one(),
        dy.data(),
        (1, u as isize),
        x.data(),
        (f as isize, 1),
        T::zero(),
        &mut dw,
        (f as isize, 1),
    );
    let mut db = vec![T::zero(); u];
    for row in dy.data().chunks(u) {
        add_into(&mut db, row);
    }
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(
        n,
        u,
        f,
        T::one(),
        dy.data(),
        (u as isize, 1),
        weight,
        (f as isize, 1),
        T::zero(),
        dx.data_mut(),
        (f as isize, 1),
    );
    (dw, db, dx)
}

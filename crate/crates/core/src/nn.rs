//! Differentiable image operations recorded on a [`Graph`].
//!
//! All image tensors are `[n, c, h, w]`. Convolutions use same-size zero
//! padding and stride 1; pooling windows use replicate padding.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Batch statistics observed by a training-mode batch norm, used to update
/// the running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Geometry of a same-padded dilated convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Scalar>(x: &[T], g: ConvGeom, col: &mut [T]) {
    let (h, w, hw) = (g.h, g.w, g.h * g.w);
    let pad = g.pad();
    for c in 0..g.cin {
        let src = &x[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            let dy = (ky * g.dilation) as isize - pad;
            for kx in 0..g.k {
                let dx = (kx * g.dilation) as isize - pad;
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x_lo = (-dx).clamp(0, w as isize) as usize;
                let x_hi = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let line = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let s_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    line[..x_lo].fill(T::zero());
                    let s_lo = (x_lo as isize + dx) as usize;
                    line[x_lo..x_hi].copy_from_slice(&s_row[s_lo..s_lo + (x_hi - x_lo)]);
                    line[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: ConvGeom, dx: &mut [T]) {
    let (h, w, hw) = (g.h, g.w, g.h * g.w);
    let pad = g.pad();
    for c in 0..g.cin {
        let dst = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            let dy = (ky * g.dilation) as isize - pad;
            for kx in 0..g.k {
                let ddx = (kx * g.dilation) as isize - pad;
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = (-ddx).clamp(0, w as isize) as usize;
                let x_hi = (w as isize - ddx).clamp(0, w as isize) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let s_lo = (x_lo as isize + ddx) as usize;
                    for (d, &s) in d_row[s_lo..s_lo + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Clamp `i + off` into `0..n`.
#[inline]
fn clampi(i: usize, off: isize, n: usize) -> usize {
    (i as isize + off).clamp(0, n as isize - 1) as usize
}

/// Precomputed bilinear taps for one sample point.
#[derive(Clone, Debug)]
pub(crate) struct Taps<T> {
    idx: [usize; 4],
    wt: [T; 4],
    len: usize,
}

/// Bilinear taps at `(x, y)` on an `h x w` grid with zero padding. Pixel
/// centers sit at integer coordinates.
pub(crate) fn bilinear_taps<T: Scalar>(x: f64, y: f64, h: usize, w: usize) -> Taps<T> {
    let mut taps = Taps {
        idx: [0; 4],
        wt: [T::zero(); 4],
        len: 0,
    };
    if !x.is_finite() || !y.is_finite() {
        return taps;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (cx, cy, wt) in corners {
        if wt == 0.0 || cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            continue;
        }
        taps.idx[taps.len] = cy as usize * w + cx as usize;
        taps.wt[taps.len] = T::lit(wt);
        taps.len += 1;
    }
    taps
}

impl<T> Taps<T>
where
    T: Scalar,
{
    #[inline]
    pub(crate) fn sample(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for t in 0..self.len {
            acc += self.wt[t] * plane[self.idx[t]];
        }
        acc
    }

    #[inline]
    pub(crate) fn scatter(&self, plane: &mut [T], g: T) {
        for t in 0..self.len {
            plane[self.idx[t]] += self.wt[t] * g;
        }
    }
}

/// Normalize groups of `len` values laid out as `(outer, len, inner)`.
/// Returns the output and the per-group norms.
fn normalize_groups<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(NORMALIZE_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut norms = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let base = o * len * inner;
        let nrm = &mut norms[o * inner..(o + 1) * inner];
        for l in 0..len {
            let row = &x[base + l * inner..base + (l + 1) * inner];
            for (n, &v) in nrm.iter_mut().zip(row) {
                *n += v * v;
            }
        }
        for n in nrm.iter_mut() {
            *n = n.sqrt();
        }
        for l in 0..len {
            let off = base + l * inner;
            for i in 0..inner {
                out[off + i] = x[off + i] / nrm[i].max(eps);
            }
        }
    }
    (out, norms)
}

fn normalize_groups_backward<T: Scalar>(
    g: &[T],
    y: &[T],
    norms: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let eps = T::lit(NORMALIZE_EPS);
    let mut dx = vec![T::zero(); g.len()];
    let mut dots = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * len * inner;
        dots.iter_mut().for_each(|d| *d = T::zero());
        for l in 0..len {
            let off = base + l * inner;
            for i in 0..inner {
                dots[i] += g[off + i] * y[off + i];
            }
        }
        let nrm = &norms[o * inner..(o + 1) * inner];
        for l in 0..len {
            let off = base + l * inner;
            for i in 0..inner {
                dx[off + i] = if nrm[i] > eps {
                    (g[off + i] - y[off + i] * dots[i]) / nrm[i]
                } else {
                    g[off + i] / eps
                };
            }
        }
    }
    dx
}

/// Apply a 1-D sliding reduction along rows (`axis = 1`) or columns
/// (`axis = 0`) of an `h x w` plane with replicate padding.
fn box_sum_axis<T: Scalar>(src: &[T], h: usize, w: usize, k: usize, axis: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for d in -r..=r {
                acc += if axis == 1 {
                    src[y * w + clampi(x, d, w)]
                } else {
                    src[clampi(y, d, h) * w + x]
                };
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Transpose of [`box_sum_axis`]: scatters each output gradient over the
/// (clamped) window that produced it.
fn box_sum_axis_backward<T: Scalar>(g: &[T], h: usize, w: usize, k: usize, axis: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for d in -r..=r {
                let idx = if axis == 1 {
                    y * w + clampi(x, d, w)
                } else {
                    clampi(y, d, h) * w + x
                };
                out[idx] += gv;
            }
        }
    }
    out
}

/// Max over a `k`-wide window along one axis with replicate padding; also
/// returns the winning index (first maximum in scan order).
fn max_axis<T: Scalar>(src: &[T], h: usize, w: usize, k: usize, axis: usize) -> (Vec<T>, Vec<usize>) {
    let r = (k / 2) as isize;
    let mut out = vec![T::zero(); h * w];
    let mut arg = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = T::neg_infinity();
            let mut best_i = 0;
            for d in -r..=r {
                let idx = if axis == 1 {
                    y * w + clampi(x, d, w)
                } else {
                    clampi(y, d, h) * w + x
                };
                if src[idx] > best {
                    best = src[idx];
                    best_i = idx;
                }
            }
            out[y * w + x] = best;
            arg[y * w + x] = best_i;
        }
    }
    (out, arg)
}

impl<T: Scalar> Graph<T> {
    /// Same-padded, stride-1 convolution. `w` is `[cout, cin, k, k]` with odd
    /// `k`; `b` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Var {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let (n, cin, h, wd) = xv.dims4();
        let ws = wv.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [cout,cin,k,k]");
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv input channels");
        assert!(k % 2 == 1 && ws[3] == k, "conv kernel must be odd and square");
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            dilation: dilation.max(1),
        };
        let hw = h * wd;
        let krows = geom.rows();
        let mut out = vec![T::zero(); n * cout * hw];
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); krows * hw] };
        for i in 0..n {
            let xi = &xv.data()[i * cin * hw..(i + 1) * cin * hw];
            let cols: &[T] = if k == 1 {
                xi
            } else {
                im2col(xi, geom, &mut col);
                &col
            };
            let oi = &mut out[i * cout * hw..(i + 1) * cout * hw];
            T::gemm(cout, krows, hw, T::one(), wv.data(), krows as isize, 1, cols, hw as isize, 1, T::zero(), oi, hw as isize, 1);
        }
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            assert_eq!(bv.len(), cout, "conv bias length");
            for i in 0..n {
                for (c, &bc) in bv.iter().enumerate() {
                    let off = (i * cout + c) * hw;
                    out[off..off + hw].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let value = Tensor::from_vec(&[n, cout, h, wd], out);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.push_op(value, &parents, move |g, _, need| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![T::zero(); n * cin * hw]);
            let mut dw = need[1].then(|| vec![T::zero(); cout * krows]);
            let mut col = vec![T::zero(); if k == 1 { 0 } else { krows * hw }];
            let mut dcol = vec![T::zero(); if dx.is_some() && k > 1 { krows * hw } else { 0 }];
            for i in 0..n {
                let gi = &gd[i * cout * hw..(i + 1) * cout * hw];
                let xi = &xv.data()[i * cin * hw..(i + 1) * cin * hw];
                if let Some(dw) = dw.as_mut() {
                    let cols: &[T] = if k == 1 {
                        xi
                    } else {
                        im2col(xi, geom, &mut col);
                        &col
                    };
                    // dW += dOut * col^T
                    T::gemm(cout, hw, krows, T::one(), gi, hw as isize, 1, cols, 1, hw as isize, T::one(), dw, krows as isize, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxi = &mut dx[i * cin * hw..(i + 1) * cin * hw];
                    if k == 1 {
                        T::gemm(krows, cout, hw, T::one(), wv.data(), 1, krows as isize, gi, hw as isize, 1, T::zero(), dxi, hw as isize, 1);
                    } else {
                        T::gemm(krows, cout, hw, T::one(), wv.data(), 1, krows as isize, gi, hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
                        col2im(&dcol, geom, dxi);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_vec(&[n, cin, h, wd], d)),
                dw.map(|d| Tensor::from_vec(&[cout, cin, k, k], d)),
            ];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut db = vec![T::zero(); cout];
                    for i in 0..n {
                        for (c, d) in db.iter_mut().enumerate() {
                            let off = (i * cout + c) * hw;
                            *d += gd[off..off + hw].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_vec(&[cout], db)
                }));
            }
            grads
        })
    }

    /// Training-mode batch normalization over `(n, h, w)` per channel,
    /// optionally followed by ReLU.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, relu: bool) -> (Var, BatchStats<T>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let m = n * hw;
        let mf = T::from_usize(m).unwrap();
        let eps = T::lit(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += xv.plane(i, ch).iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut v = T::zero();
            for i in 0..n {
                v += xv.plane(i, ch).iter().map(|&a| (a - mu) * (a - mu)).sum::<T>();
            }
            mean[ch] = mu;
            var[ch] = v / mf;
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(&[n, c, h, w], |idx| {
            let ch = (idx / hw) % c;
            (xv.data()[idx] - mean[ch]) * invstd[ch]
        });
        let stats = BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|&v| if m > 1 { v * mf / T::from_usize(m - 1).unwrap() } else { v })
                .collect(),
        };
        let out = self.affine_from_xhat(x, gamma, beta, xhat, invstd, relu, true);
        (out, stats)
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        relu: bool,
    ) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let eps = T::lit(BN_EPS);
        let invstd: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(&[n, c, h, w], |idx| {
            let ch = (idx / hw) % c;
            (xv.data()[idx] - running_mean[ch]) * invstd[ch]
        });
        self.affine_from_xhat(x, gamma, beta, xhat, invstd, relu, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_from_xhat(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        invstd: Vec<T>,
        relu: bool,
        batch_stats: bool,
    ) -> Var {
        let (n, c, h, w) = xhat.dims4();
        let hw = h * w;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let value = Tensor::from_fn(&[n, c, h, w], |idx| {
            let ch = (idx / hw) % c;
            let y = gv[ch] * xhat.data()[idx] + bv[ch];
            if relu {
                y.max(T::zero())
            } else {
                y
            }
        });
        let xhat = Rc::new(xhat);
        self.push_op(value, &[x, gamma, beta], move |g, out, need| {
            let mf = T::from_usize(n * hw).unwrap();
            let gd: Vec<T> = if relu {
                g.data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gg, &y)| if y > T::zero() { gg } else { T::zero() })
                    .collect()
            } else {
                g.data().to_vec()
            };
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * hw;
                    for p in off..off + hw {
                        dbeta[ch] += gd[p];
                        dgamma[ch] += gd[p] * xhat.data()[p];
                    }
                }
            }
            let dx = need[0].then(|| {
                Tensor::from_fn(&[n, c, h, w], |idx| {
                    let ch = (idx / hw) % c;
                    let k = gv[ch] * invstd[ch];
                    if batch_stats {
                        k / mf * (mf * gd[idx] - dbeta[ch] - xhat.data()[idx] * dgamma[ch])
                    } else {
                        k * gd[idx]
                    }
                })
            });
            vec![
                dx,
                need[1].then(|| Tensor::from_vec(&[c], dgamma.clone())),
                need[2].then(|| Tensor::from_vec(&[c], dbeta.clone())),
            ]
        })
    }

    /// Instance normalization (no affine) followed by ReLU.
    pub fn instance_norm_relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mf = T::from_usize(hw).unwrap();
        let eps = T::lit(BN_EPS);
        let mut xhat = Tensor::zeros(&[n, c, h, w]);
        let mut invstd = vec![T::zero(); n * c];
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.plane(i, ch);
                let mu = plane.iter().copied().sum::<T>() / mf;
                let var = plane.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / mf;
                let is = T::one() / (var + eps).sqrt();
                invstd[i * c + ch] = is;
                for (o, &a) in xhat.plane_mut(i, ch).iter_mut().zip(plane) {
                    *o = (a - mu) * is;
                }
            }
        }
        let value = xhat.map(|v| v.max(T::zero()));
        let xhat = Rc::new(xhat);
        self.push_op(value, &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                for ch in 0..c {
                    let xh = xhat.plane(i, ch);
                    let gp = g.plane(i, ch);
                    let mut s = T::zero();
                    let mut sx = T::zero();
                    for (&gg, &a) in gp.iter().zip(xh) {
                        if a > T::zero() {
                            s += gg;
                            sx += gg * a;
                        }
                    }
                    let is = invstd[i * c + ch];
                    for ((d, &gg), &a) in dx.plane_mut(i, ch).iter_mut().zip(gp).zip(xh) {
                        let gm = if a > T::zero() { gg } else { T::zero() };
                        *d = is / mf * (mf * gm - s - a * sx);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// `exp(x) / AP3(exp(x))` with a 3x3 replicate-padded averaging window.
    /// The local maximum is subtracted inside the exponent before dividing;
    /// this leaves the value unchanged.
    pub fn local_softmax(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let ninth = T::one() / T::lit(9.0);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut local_max = vec![T::zero(); n * c * hw];
        let mut denom = vec![T::zero(); n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.plane(i, ch);
                let base = (i * c + ch) * hw;
                let op = out.plane_mut(i, ch);
                for y in 0..h {
                    for xx in 0..w {
                        let mut m = T::neg_infinity();
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                m = m.max(plane[clampi(y, dy, h) * w + clampi(xx, dx, w)]);
                            }
                        }
                        let mut s = T::zero();
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                s += (plane[clampi(y, dy, h) * w + clampi(xx, dx, w)] - m).exp();
                            }
                        }
                        let a = s * ninth;
                        let p = y * w + xx;
                        local_max[base + p] = m;
                        denom[base + p] = a;
                        op[p] = (plane[p] - m).exp() / a;
                    }
                }
            }
        }
        self.push_op(out, &[x], move |g, out, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let plane = xv.plane(i, ch);
                    let gp = g.plane(i, ch);
                    let yp = out.plane(i, ch);
                    let dp = dx.plane_mut(i, ch);
                    for p in 0..hw {
                        dp[p] += gp[p] * yp[p];
                    }
                    for y in 0..h {
                        for xx in 0..w {
                            let p = y * w + xx;
                            let coef = gp[p] * yp[p] / denom[base + p] * ninth;
                            if coef == T::zero() {
                                continue;
                            }
                            let m = local_max[base + p];
                            for dy in -1..=1 {
                                for ddx in -1..=1 {
                                    let q = clampi(y, dy, h) * w + clampi(xx, ddx, w);
                                    dp[q] -= coef * (plane[q] - m).exp();
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Softmax across channels at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (i * c + ch) * hw + p;
                let m = (0..c).map(|ch| xv.data()[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (xv.data()[at(ch)] - m).exp();
                    out.data_mut()[at(ch)] = e;
                    s += e;
                }
                for ch in 0..c {
                    out.data_mut()[at(ch)] /= s;
                }
            }
        }
        self.push_op(out, &[x], move |g, out, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                for p in 0..hw {
                    let at = |ch: usize| (i * c + ch) * hw + p;
                    let dot: T = (0..c).map(|ch| g.data()[at(ch)] * out.data()[at(ch)]).sum();
                    for ch in 0..c {
                        dx.data_mut()[at(ch)] = out.data()[at(ch)] * (g.data()[at(ch)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Channel `ch` as a `[n, 1, h, w]` tensor.
    pub fn select_channel(&mut self, x: Var, ch: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(ch < c, "channel {ch} out of {c}");
        let mut data = Vec::with_capacity(n * h * w);
        for i in 0..n {
            data.extend_from_slice(xv.plane(i, ch));
        }
        self.push_op(Tensor::from_vec(&[n, 1, h, w], data), &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                dx.plane_mut(i, ch).copy_from_slice(g.plane(i, 0));
            }
            vec![Some(dx)]
        })
    }

    /// Image `i` of a batch as `[1, c, h, w]`.
    pub fn select_batch(&mut self, x: Var, i: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(i < n, "batch index {i} out of {n}");
        let value = xv.batch_item(i);
        self.push_op(value, &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let len = c * h * w;
            dx.data_mut()[i * len..(i + 1) * len].copy_from_slice(g.data());
            vec![Some(dx)]
        })
    }

    /// Unit l2 norm across channels at every pixel of a `[n, c, h, w]` map.
    pub fn l2_normalize_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        self.normalize_op(x, n, c, h * w)
    }

    /// Unit l2 norm for every row of a `[rows, cols]` matrix.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 2, "expected a matrix");
        self.normalize_op(x, s[0], s[1], 1)
    }

    fn normalize_op(&mut self, x: Var, outer: usize, len: usize, inner: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (out, norms) = normalize_groups(self.value(x).data(), outer, len, inner);
        self.push_op(Tensor::from_vec(&shape, out), &[x], move |g, out, _| {
            let dx = normalize_groups_backward(g.data(), out.data(), &norms, outer, len, inner);
            vec![Some(Tensor::from_vec(g.shape(), dx))]
        })
    }

    /// `k x k` average pooling, stride 1, replicate padding.
    pub fn avg_pool_replicate(&mut self, x: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "pool window must be odd");
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            for ch in 0..c {
                let rows = box_sum_axis(xv.plane(i, ch), h, w, k, 1);
                let both = box_sum_axis(&rows, h, w, k, 0);
                for (o, v) in out.plane_mut(i, ch).iter_mut().zip(both) {
                    *o = v * inv;
                }
            }
        }
        self.push_op(out, &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                for ch in 0..c {
                    let cols = box_sum_axis_backward(g.plane(i, ch), h, w, k, 0);
                    let both = box_sum_axis_backward(&cols, h, w, k, 1);
                    for (d, v) in dx.plane_mut(i, ch).iter_mut().zip(both) {
                        *d = v * inv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// `k x k` max pooling, stride 1, replicate padding. The gradient goes to
    /// the first maximal pixel of each window.
    pub fn max_pool_replicate(&mut self, x: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "pool window must be odd");
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut source = vec![0usize; n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                let (rows, row_arg) = max_axis(xv.plane(i, ch), h, w, k, 1);
                let (both, col_arg) = max_axis(&rows, h, w, k, 0);
                out.plane_mut(i, ch).copy_from_slice(&both);
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    source[base + p] = row_arg[col_arg[p]];
                }
            }
        }
        self.push_op(out, &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let gp = g.plane(i, ch).to_vec();
                    let dp = dx.plane_mut(i, ch);
                    for (p, gv) in gp.into_iter().enumerate() {
                        dp[source[base + p]] += gv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Bilinear samples of a `[1, c, h, w]` map at `points` (x, y), returned
    /// as a `[points, c]` matrix. Samples falling outside the map read zeros.
    pub fn sample_points(&mut self, x: Var, points: &[[f64; 2]]) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(n, 1, "sample_points expects a single image");
        let taps: Vec<Taps<T>> = points.iter().map(|p| bilinear_taps(p[0], p[1], h, w)).collect();
        let np = points.len();
        let mut out = vec![T::zero(); np * c];
        for ch in 0..c {
            let plane = xv.plane(0, ch);
            for (pi, t) in taps.iter().enumerate() {
                out[pi * c + ch] = t.sample(plane);
            }
        }
        self.push_op(Tensor::from_vec(&[np, c], out), &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&[1, c, h, w]);
            for ch in 0..c {
                let plane = dx.plane_mut(0, ch);
                for (pi, t) in taps.iter().enumerate() {
                    t.scatter(plane, g.data()[pi * c + ch]);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Resample a `[1, c, h, w]` map onto an `out_h x out_w` grid, reading
    /// output pixel `i` (row-major) at `sources[i]`.
    pub fn resample(&mut self, x: Var, sources: &[[f64; 2]], out_h: usize, out_w: usize) -> Var {
        assert_eq!(sources.len(), out_h * out_w, "one source per output pixel");
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(n, 1, "resample expects a single image");
        let taps: Vec<Taps<T>> = sources.iter().map(|p| bilinear_taps(p[0], p[1], h, w)).collect();
        let mut out = Tensor::zeros(&[1, c, out_h, out_w]);
        for ch in 0..c {
            let plane = xv.plane(0, ch);
            for (o, t) in out.plane_mut(0, ch).iter_mut().zip(&taps) {
                *o = t.sample(plane);
            }
        }
        self.push_op(out, &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&[1, c, h, w]);
            for ch in 0..c {
                let gp = g.plane(0, ch);
                let plane = dx.plane_mut(0, ch);
                for (t, &gv) in taps.iter().zip(gp) {
                    t.scatter(plane, gv);
                }
            }
            vec![Some(dx)]
        })
    }
}

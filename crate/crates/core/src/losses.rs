//! Training objectives.
//!
//! Descriptor losses work on the `N` sampled correspondences of a
//! [`CorrespondenceBatch`]: rows of `D` at `coords_a` and of `D'` at
//! `coords_b`. Detector losses work on whole `[1, 1, h, w]` score maps.
//! Every coupling between the two heads enters through a detached weight
//! (`a`, `b`, `c` and the edge prior `M`), so the detector never pulls on
//! the descriptors and vice versa.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{warp_sources, CorrespondenceBatch, Homography, Mask};
use crate::image_io::luminance;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LAMBDA: f64 = 8.0;
pub const ACOS_EPS: f64 = 1e-7;
pub const PATCH_EPS: f64 = 1e-8;
pub const EDGE_EPS: f64 = 1e-8;
pub const SAFE_RADIUS: f64 = 5.0;
pub const PATCH_SIZE: usize = 17;
pub const PATCH_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Negatives closer than this (pixels) to the anchor are inadmissible.
    pub safe_radius: f64,
    /// Window of the repeatability patches and of the peaking pools.
    pub patch_size: usize,
    pub patch_stride: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            safe_radius: SAFE_RADIUS,
            patch_size: PATCH_SIZE,
            patch_stride: PATCH_STRIDE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.safe_radius >= 0.0) {
            return Err(Error::Config("safe_radius must be >= 0".into()));
        }
        if self.patch_size % 2 == 0 || self.patch_stride == 0 {
            return Err(Error::Config("patch_size must be odd and patch_stride positive".into()));
        }
        Ok(())
    }
}

/// `acos(d1·d2)` with the dot product clamped to `[-1 + ε, 1 - ε]`.
pub fn angular_distance<T: Scalar>(d1: &[T], d2: &[T]) -> T {
    let dot: T = d1.iter().zip(d2).map(|(&a, &b)| a * b).sum();
    clamp_dot(dot).acos()
}

fn clamp_dot<T: Scalar>(dot: T) -> T {
    let lim = T::one() - T::lit(ACOS_EPS);
    dot.max(-lim).min(lim)
}

/// `d acos(clamp(x)) / dx`; zero where the clamp is active.
fn dacos<T: Scalar>(dot: T) -> T {
    let lim = T::one() - T::lit(ACOS_EPS);
    if dot >= lim || dot <= -lim {
        T::zero()
    } else {
        -T::one() / (T::one() - dot * dot).sqrt()
    }
}

/// Hard negatives per anchor. `anchors[t]` is the batch index `i` of the
/// `t`-th kept anchor; the other vectors are aligned with it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NegativeSet {
    pub anchors: Vec<usize>,
    /// Nearest in `D` to `d_i`.
    pub j: Vec<usize>,
    /// Nearest in `D'` to `d_i'`.
    pub k: Vec<usize>,
    /// Nearest in `D'` to `d_i`.
    pub n: Vec<usize>,
    /// Nearest in `D` to `d_i'`.
    pub m: Vec<usize>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Nearest non-matching neighbours by angular distance. Candidates on the
/// `A` side must lie farther than `safe_radius` from `coords_a[i]`, those
/// on the `B` side farther than `safe_radius` from `coords_b[i]`. Anchors
/// without an admissible candidate on either side are dropped. Ties go to
/// the lowest index.
pub fn mine_negatives<T: Scalar>(desc_a: &Tensor<T>, desc_b: &Tensor<T>, coords_a: &[[f64; 2]], coords_b: &[[f64; 2]], safe_radius: f64) -> NegativeSet {
    let (n, c) = (desc_a.shape()[0], desc_a.shape()[1]);
    assert_eq!(desc_b.shape(), desc_a.shape(), "descriptor sets differ in shape");
    assert!(coords_a.len() == n && coords_b.len() == n, "one coordinate per descriptor");
    // Cosine similarities; the largest dot is the smallest clamped angle,
    // so ties after clamping are resolved on the clamped value.
    let gram = |x: &Tensor<T>, y: &Tensor<T>| {
        let mut out = vec![T::zero(); n * n];
        T::gemm(n, c, n, T::one(), x.data(), c as isize, 1, y.data(), 1, c as isize, T::zero(), &mut out, n as isize, 1);
        out.iter_mut().for_each(|v| *v = clamp_dot(*v));
        out
    };
    let aa = gram(desc_a, desc_a);
    let bb = gram(desc_b, desc_b);
    let ab = gram(desc_a, desc_b);
    let r2 = safe_radius * safe_radius;
    let best = |row: &dyn Fn(usize) -> T, admissible: &dyn Fn(usize) -> bool| -> Option<usize> {
        let mut arg = None;
        let mut top = T::neg_infinity();
        for q in 0..n {
            if admissible(q) && row(q) > top {
                top = row(q);
                arg = Some(q);
            }
        }
        arg
    };
    let mut out = NegativeSet::default();
    for i in 0..n {
        let far_a = |q: usize| dist2(coords_a[q], coords_a[i]) > r2;
        let far_b = |q: usize| dist2(coords_b[q], coords_b[i]) > r2;
        let j = best(&|q| aa[i * n + q], &far_a);
        let k = best(&|q| bb[i * n + q], &far_b);
        let nn = best(&|q| ab[i * n + q], &far_b);
        let m = best(&|q| ab[q * n + i], &far_a);
        if let (Some(j), Some(k), Some(nn), Some(m)) = (j, k, nn, m) {
            out.anchors.push(i);
            out.j.push(j);
            out.k.push(k);
            out.n.push(nn);
            out.m.push(m);
        }
    }
    out
}

/// The matching risk from its five angles:
/// `[(π-θk)² + (π-θj)² + (π-max(θn, θm))² + 3θp²]²`.
pub fn risk_from_angles(theta_k: f64, theta_j: f64, theta_n: f64, theta_m: f64, theta_pos: f64) -> f64 {
    let inner = (PI - theta_k).powi(2) + (PI - theta_j).powi(2) + (PI - theta_n.max(theta_m)).powi(2) + 3.0 * theta_pos.powi(2);
    inner * inner
}

/// Per-anchor matching risk `R(d_i; D, D')` from the sampled descriptor
/// rows `da`, `db` (`[N, C]`, unit norm). With `swap` the roles of the two
/// images are exchanged: the anchor becomes `d_i'`, its positive `d_i`,
/// and the same negatives are used. Output shape `[anchors]`.
pub fn matching_risk<T: Scalar>(g: &mut Graph<T>, da: Var, db: Var, neg: &NegativeSet, swap: bool) -> Var {
    let av = g.value_rc(da);
    let bv = g.value_rc(db);
    let c = av.shape()[1];
    let pi = T::lit(PI);
    let three = T::lit(3.0);
    // Each pair is (anchor row, other row, other row lives in D'); slot
    // order k, j, n, m, positive. Negatives keep their sets under `swap`.
    let rows = move |t: usize, slot: usize, neg: &NegativeSet| -> (usize, usize, bool) {
        let i = neg.anchors[t];
        match slot {
            0 => (i, neg.k[t], true),
            1 => (i, neg.j[t], false),
            2 => (i, neg.n[t], true),
            3 => (i, neg.m[t], false),
            _ => (i, i, !swap),
        }
    };
    let neg = neg.clone();
    let na = neg.len();
    let mut dots = vec![T::zero(); na * 5];
    let mut out = vec![T::zero(); na];
    let row = |side_b: bool, r: usize| -> &[T] {
        let src = if side_b { &bv } else { &av };
        &src.data()[r * c..(r + 1) * c]
    };
    for t in 0..na {
        let mut th = [T::zero(); 5];
        for slot in 0..5 {
            let (i, o, ob) = rows(t, slot, &neg);
            let anchor = row(swap, i);
            let other = row(ob, o);
            let d: T = anchor.iter().zip(other).map(|(&x, &y)| x * y).sum();
            dots[t * 5 + slot] = d;
            th[slot] = clamp_dot(d).acos();
        }
        let inner = (pi - th[0]).powi(2) + (pi - th[1]).powi(2) + (pi - th[2].max(th[3])).powi(2) + three * th[4] * th[4];
        out[t] = inner * inner;
    }
    g.push_op(Tensor::from_vec(&[na], out), &[da, db], move |grad, _, _| {
        let mut ga = Tensor::zeros(av.shape());
        let mut gb = Tensor::zeros(bv.shape());
        let two = T::lit(2.0);
        for t in 0..na {
            let d = &dots[t * 5..t * 5 + 5];
            let th: Vec<T> = d.iter().map(|&x| clamp_dot(x).acos()).collect();
            let n_wins = th[2] >= th[3];
            let inner = (pi - th[0]).powi(2) + (pi - th[1]).powi(2) + (pi - th[2].max(th[3])).powi(2) + three * th[4] * th[4];
            let up = grad.data()[t] * two * inner;
            let dth = [
                -two * (pi - th[0]),
                -two * (pi - th[1]),
                if n_wins { -two * (pi - th[2]) } else { T::zero() },
                if n_wins { T::zero() } else { -two * (pi - th[3]) },
                two * three * th[4],
            ];
            for slot in 0..5 {
                let coef = up * dth[slot] * dacos(d[slot]);
                if coef == T::zero() {
                    continue;
                }
                let (i, o, ob) = rows(t, slot, &neg);
                let (a_side_b, o_side_b) = (swap, ob);
                for ch in 0..c {
                    let x = if a_side_b { bv.data()[i * c + ch] } else { av.data()[i * c + ch] };
                    let y = if o_side_b { bv.data()[o * c + ch] } else { av.data()[o * c + ch] };
                    let (ta, to) = (if a_side_b { &mut gb } else { &mut ga }, coef * y);
                    ta.data_mut()[i * c + ch] += to;
                    let tb = if o_side_b { &mut gb } else { &mut ga };
                    tb.data_mut()[o * c + ch] += coef * x;
                }
            }
        }
        vec![Some(ga), Some(gb)]
    })
}

/// Mean matching risk over the kept anchors; 0 when none is left.
pub fn desc_basic_loss<T: Scalar>(g: &mut Graph<T>, risks: Var) -> Var {
    mean_or_zero(g, risks)
}

fn mean_or_zero<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    if g.value(x).numel() == 0 {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        g.mean(x)
    }
}

/// `a_i = ReLU(1 - R_i / mean(R))`, as plain (detached) values.
pub fn weight_a<T: Scalar>(risks: &Tensor<T>) -> Tensor<T> {
    if risks.numel() == 0 {
        return risks.clone();
    }
    let mean = risks.mean();
    if mean <= T::zero() {
        return Tensor::zeros(risks.shape());
    }
    risks.map(|r| (T::one() - r / mean).max(T::zero()))
}

/// Edge prior `M = ReLU(1 - e / (mean(e) + ε))` with `e` the absolute
/// 4-neighbour Laplacian of the luminance (replicate borders). Returns a
/// `[1, 1, h, w]` map.
pub fn edge_prior<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let lum = luminance(image);
    let (n, _, h, w) = lum.dims4();
    assert_eq!(n, 1, "edge_prior expects a single image");
    let p = lum.plane(0, 0);
    let at = |y: isize, x: isize| p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut e = Tensor::zeros(&[1, 1, h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - T::lit(4.0) * at(y, x);
            e.data_mut()[y as usize * w + x as usize] = lap.abs();
        }
    }
    let denom = e.mean() + T::lit(EDGE_EPS);
    e.map(|v| (T::one() - v / denom).max(T::zero()))
}

/// `mean(AP(S)² + (1 - MP(S))²)` with `window`-sized average and max pools
/// (stride 1, replicate borders).
pub fn peak_basic_loss<T: Scalar>(g: &mut Graph<T>, s: Var, window: usize) -> Var {
    let ap = g.avg_pool_replicate(s, window);
    let mp = g.max_pool_replicate(s, window);
    let ap2 = g.square(ap);
    let miss = g.rsub_scalar(T::one(), mp);
    let miss2 = g.square(miss);
    let sum = g.add(ap2, miss2);
    g.mean(sum)
}

/// Peaking loss with the detached couplings: the basic term, the edge-prior
/// penalty `mean((M·S)²)` and the anchor term `mean(a_i (1 - s_i)²)`.
/// `anchor_scores` holds `s_i` for the kept anchors (`[anchors]`),
/// `risks` their detached matching risks.
pub fn peak_recoupled_loss<T: Scalar>(g: &mut Graph<T>, s: Var, anchor_scores: Var, risks: &Tensor<T>, image: &Tensor<T>, window: usize) -> Var {
    peak_weighted(g, s, anchor_scores, &weight_a(risks), &edge_prior(image), window)
}

fn peak_weighted<T: Scalar>(g: &mut Graph<T>, s: Var, anchor_scores: Var, a: &Tensor<T>, m: &Tensor<T>, window: usize) -> Var {
    let basic = peak_basic_loss(g, s, window);
    let m = g.constant(m.clone());
    let ms = g.mul(m, s);
    let ms2 = g.square(ms);
    let edge = g.mean(ms2);
    let mut terms = vec![basic, edge];
    if a.numel() > 0 {
        let miss = g.rsub_scalar(T::one(), anchor_scores);
        let miss2 = g.square(miss);
        terms.push(weighted_mean(g, a, miss2));
    }
    g.add_all(&terms)
}

/// Top-left corners `(y, x)` of the `size x size` patches at `stride` whose
/// footprint lies entirely inside `mask`.
pub fn patch_grid(mask: &Mask, size: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if mask.h < size || mask.w < size {
        return out;
    }
    let mut y0 = 0;
    while y0 + size <= mask.h {
        let mut x0 = 0;
        while x0 + size <= mask.w {
            let full = (y0..y0 + size).all(|y| mask.data[y * mask.w + x0..y * mask.w + x0 + size].iter().all(|&v| v));
            if full {
                out.push((y0, x0));
            }
            x0 += stride;
        }
        y0 += stride;
    }
    out
}

/// Cosine between corresponding flattened patches of two `[1, 1, h, w]`
/// maps, each normalized as `x / max(|x|, ε)`. Output shape `[patches]`.
pub fn patch_cosines<T: Scalar>(g: &mut Graph<T>, s: Var, sw: Var, patches: &[(usize, usize)], size: usize) -> Var {
    let a = g.value_rc(s);
    let b = g.value_rc(sw);
    assert_eq!(a.shape(), b.shape(), "patch maps differ in shape");
    let w = a.shape()[3];
    let eps = T::lit(PATCH_EPS);
    let patches = patches.to_vec();
    let idx = move |(y0, x0): (usize, usize)| (0..size * size).map(move |q| (y0 + q / size) * w + x0 + q % size);
    // Per patch: dot, |a|, |b|.
    let stats: Vec<(T, T, T)> = patches
        .iter()
        .map(|&p| {
            let (mut d, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for q in idx(p) {
                let (x, y) = (a.data()[q], b.data()[q]);
                d += x * y;
                na += x * x;
                nb += y * y;
            }
            (d, na.sqrt(), nb.sqrt())
        })
        .collect();
    let out: Vec<T> = stats.iter().map(|&(d, na, nb)| d / (na.max(eps) * nb.max(eps))).collect();
    g.push_op(Tensor::from_vec(&[patches.len()], out), &[s, sw], move |grad, out, needs| {
        let mut ga = Tensor::zeros(a.shape());
        let mut gb = Tensor::zeros(b.shape());
        for (pi, &p) in patches.iter().enumerate() {
            let (_, na, nb) = stats[pi];
            let (ca, cb) = (na.max(eps), nb.max(eps));
            let cos = out.data()[pi];
            let gv = grad.data()[pi];
            // d cos / d a = b / (ca cb) - cos a / |a|² when |a| > ε.
            let ka = if na > eps { cos / (na * na) } else { T::zero() };
            let kb = if nb > eps { cos / (nb * nb) } else { T::zero() };
            for q in idx(p) {
                let (x, y) = (a.data()[q], b.data()[q]);
                if needs[0] {
                    ga.data_mut()[q] += gv * (y / (ca * cb) - ka * x);
                }
                if needs[1] {
                    gb.data_mut()[q] += gv * (x / (ca * cb) - kb * y);
                }
            }
        }
        vec![Some(ga), Some(gb)]
    })
}

/// Result of a patch-based loss; `no_valid_patch` flags an empty grid, in
/// which case the loss is 0.
#[derive(Clone, Copy, Debug)]
pub struct PatchLoss {
    pub loss: Var,
    pub patches: usize,
    pub no_valid_patch: bool,
}

/// `mean_p (1 - cos(S[p], S'_w[p]))` over the fully valid patch grid.
pub fn rep_basic_loss<T: Scalar>(g: &mut Graph<T>, s: Var, sw: Var, mask: &Mask, cfg: &LossConfig) -> PatchLoss {
    rep_weighted(g, s, sw, mask, cfg, None)
}

/// `b(p)`: mean descriptor cosine over the pixels of a patch, clamped at 0.
pub fn weight_b<T: Scalar>(patch: (usize, usize), size: usize, d: &Tensor<T>, dw: &Tensor<T>) -> T {
    let (_, c, h, w) = d.dims4();
    assert_eq!(d.shape(), dw.shape(), "descriptor maps differ in shape");
    let hw = h * w;
    let (y0, x0) = patch;
    let mut acc = T::zero();
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let p = y * w + x;
            for ch in 0..c {
                acc += d.data()[ch * hw + p] * dw.data()[ch * hw + p];
            }
        }
    }
    (acc / T::from_usize(size * size).unwrap()).max(T::zero())
}

/// `mean_p b(p) (1 - cos(S[p], S'_w[p]))` with `b` computed from the
/// detached descriptor maps `d` and `dw` (both `[1, C, h, w]`).
pub fn rep_recoupled_loss<T: Scalar>(g: &mut Graph<T>, s: Var, sw: Var, d: &Tensor<T>, dw: &Tensor<T>, mask: &Mask, cfg: &LossConfig) -> PatchLoss {
    rep_weighted(g, s, sw, mask, cfg, Some((d, dw)))
}

fn rep_weighted<T: Scalar>(g: &mut Graph<T>, s: Var, sw: Var, mask: &Mask, cfg: &LossConfig, desc: Option<(&Tensor<T>, &Tensor<T>)>) -> PatchLoss {
    let patches = patch_grid(mask, cfg.patch_size, cfg.patch_stride);
    if patches.is_empty() {
        return PatchLoss {
            loss: g.constant(Tensor::scalar(T::zero())),
            patches: 0,
            no_valid_patch: true,
        };
    }
    let cos = patch_cosines(g, s, sw, &patches, cfg.patch_size);
    let miss = g.rsub_scalar(T::one(), cos);
    if let Some((d, dw)) = desc {
        let b: Vec<T> = patches.iter().map(|&p| weight_b(p, cfg.patch_size, d, dw)).collect();
        return PatchLoss {
            loss: weighted_mean(g, &Tensor::from_vec(&[patches.len()], b), miss),
            patches: patches.len(),
            no_valid_patch: false,
        };
    }
    PatchLoss {
        loss: g.mean(miss),
        patches: patches.len(),
        no_valid_patch: false,
    }
}

/// `mean_i c_i R_i` with `c_i = s_i s_i'` detached.
pub fn desc_recoupled_loss<T: Scalar>(g: &mut Graph<T>, risks: Var, scores_a: Var, scores_b: Var) -> Var {
    let c = g.value(scores_a).zip_map(g.value(scores_b), |x, y| x * y);
    weighted_mean(g, &c, risks)
}

/// `mean_i s_i s_i' R_i` with gradients through the scores. This is the
/// coupling that admits the all-zero score map as a minimum.
pub fn naive_coupled_loss<T: Scalar>(g: &mut Graph<T>, risks: Var, scores_a: Var, scores_b: Var) -> Var {
    let c = g.mul(scores_a, scores_b);
    let weighted = g.mul(c, risks);
    mean_or_zero(g, weighted)
}

/// Network outputs for one image: `[1, C, h, w]` unit descriptors and a
/// `[1, 1, h, w]` score map.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    pub descriptors: Var,
    pub scores: Var,
}

/// One training pair. `homography` maps pixels of `image_a` into
/// `image_b`; the images are the raw (unstandardized) network inputs.
#[derive(Clone, Copy, Debug)]
pub struct PairInputs<'a, T> {
    pub image_a: &'a Tensor<T>,
    pub image_b: &'a Tensor<T>,
    pub homography: &'a Homography,
    pub batch: &'a CorrespondenceBatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Recoupled,
    /// `mean(s_i s_i' R_i)` alone, gradients through the scores.
    NaiveCoupled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub desc_r: f64,
    pub peak_r_a: f64,
    pub peak_r_b: f64,
    pub rep_r: f64,
    pub total: f64,
    pub lambda: f64,
    pub anchors: usize,
    pub rep_patches: usize,
    pub no_valid_patch: bool,
}

/// Graph handles of the individual terms of [`total_loss`]. Under the naive
/// objective only `desc_r` is live and the others are constant zeros.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub desc_r: Var,
    pub peak_r_a: Var,
    pub peak_r_b: Var,
    pub rep_r: Var,
}

/// The detached weights of one evaluation of [`total_loss`]: `c` and the
/// two `a` vectors per kept anchor, `b` per repeatability patch.
#[derive(Clone, Debug, PartialEq)]
pub struct DetachedWeights<T> {
    pub c: Tensor<T>,
    pub a_a: Tensor<T>,
    pub a_b: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PairLoss<T> {
    pub total: Var,
    pub terms: LossTerms,
    pub breakdown: LossBreakdown,
    pub weights: DetachedWeights<T>,
}

/// The full objective for one pair:
/// `desc_R + peak_R(S) + peak_R(S') + λ rep_R`, or the naive coupled loss.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, fa: ImageFeatures, fb: ImageFeatures, pair: &PairInputs<T>, cfg: &LossConfig, objective: Objective) -> Result<PairLoss<T>> {
    total_loss_impl(g, fa, fb, pair, cfg, objective, None)
}

/// [`total_loss`] with the detached weights replaced by `weights`, e.g. the
/// ones of an earlier evaluation. Finite differences taken through this
/// function see the same constants the analytic gradient does.
pub fn total_loss_frozen<T: Scalar>(g: &mut Graph<T>, fa: ImageFeatures, fb: ImageFeatures, pair: &PairInputs<T>, cfg: &LossConfig, weights: &DetachedWeights<T>) -> Result<PairLoss<T>> {
    total_loss_impl(g, fa, fb, pair, cfg, Objective::Recoupled, Some(weights))
}

fn total_loss_impl<T: Scalar>(
    g: &mut Graph<T>,
    fa: ImageFeatures,
    fb: ImageFeatures,
    pair: &PairInputs<T>,
    cfg: &LossConfig,
    objective: Objective,
    frozen: Option<&DetachedWeights<T>>,
) -> Result<PairLoss<T>> {
    let batch = pair.batch.compacted();
    if batch.is_empty() {
        return Err(Error::InsufficientOverlap { valid: 0, required: 1 });
    }
    let pts_a = batch.points_a();
    let pts_b = batch.coords_b.clone();

    let da = g.sample_points(fa.descriptors, &pts_a);
    let db_raw = g.sample_points(fb.descriptors, &pts_b);
    let db = g.l2_normalize_rows(db_raw);
    let neg = mine_negatives(g.value(da), g.value(db), &pts_a, &pts_b, cfg.safe_radius);

    let kept_a: Vec<[f64; 2]> = neg.anchors.iter().map(|&i| pts_a[i]).collect();
    let kept_b: Vec<[f64; 2]> = neg.anchors.iter().map(|&i| pts_b[i]).collect();
    let na = neg.len();
    let sa = g.sample_points(fa.scores, &kept_a);
    let sa = g.reshape(sa, &[na]);
    let sb = g.sample_points(fb.scores, &kept_b);
    let sb = g.reshape(sb, &[na]);

    let risks = matching_risk(g, da, db, &neg, false);
    let val = |g: &Graph<T>, v: Var| g.value(v).item().to_f64().unwrap();

    if objective == Objective::NaiveCoupled {
        let total = naive_coupled_loss(g, risks, sa, sb);
        let zero = g.constant(Tensor::scalar(T::zero()));
        let v = val(g, total);
        return Ok(PairLoss {
            total,
            terms: LossTerms {
                desc_r: total,
                peak_r_a: zero,
                peak_r_b: zero,
                rep_r: zero,
            },
            breakdown: LossBreakdown {
                desc_r: v,
                total: v,
                lambda: cfg.lambda,
                anchors: na,
                ..Default::default()
            },
            weights: DetachedWeights {
                c: Tensor::zeros(&[0]),
                a_a: Tensor::zeros(&[0]),
                a_b: Tensor::zeros(&[0]),
                b: Tensor::zeros(&[0]),
            },
        });
    }

    let c = match frozen {
        Some(w) => w.c.clone(),
        None => g.value(sa).zip_map(g.value(sb), |x, y| x * y),
    };
    let desc_r = weighted_mean(g, &c, risks);

    let (a_a, a_b) = match frozen {
        Some(w) => (w.a_a.clone(), w.a_b.clone()),
        None => {
            let risks_b = {
                let mut scratch = Graph::<T>::new();
                let a = scratch.constant(g.value(da).clone());
                let b = scratch.constant(g.value(db).clone());
                let r = matching_risk(&mut scratch, a, b, &neg, true);
                scratch.value(r).clone()
            };
            (weight_a(g.value(risks)), weight_a(&risks_b))
        }
    };
    let m_a = edge_prior(pair.image_a);
    let m_b = edge_prior(pair.image_b);
    let peak_a = peak_weighted(g, fa.scores, sa, &a_a, &m_a, cfg.patch_size);
    let peak_b = peak_weighted(g, fb.scores, sb, &a_b, &m_b, cfg.patch_size);

    let (_, _, ha, wa) = g.value(fa.scores).dims4();
    let (_, _, hb, wb) = g.value(fb.scores).dims4();
    // Sources in B for every pixel of A: H·p.
    let (sources, mask) = warp_sources(&pair.homography.inverse(), (hb, wb), (ha, wa));
    let patches = patch_grid(&mask, cfg.patch_size, cfg.patch_stride);
    let b = match frozen {
        Some(w) => w.b.clone(),
        None => {
            let d_a = g.value(fa.descriptors);
            let dw = crate::geometry::resample_plain(g.value(fb.descriptors), &sources, &mask);
            let dw = normalize_valid(dw, &mask);
            Tensor::from_vec(&[patches.len()], patches.iter().map(|&p| weight_b(p, cfg.patch_size, d_a, &dw)).collect())
        }
    };
    let rep = if patches.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        let sw = g.resample(fb.scores, &sources, ha, wa);
        let cos = patch_cosines(g, fa.scores, sw, &patches, cfg.patch_size);
        let miss = g.rsub_scalar(T::one(), cos);
        weighted_mean(g, &b, miss)
    };

    let rep_scaled = g.scale(rep, T::lit(cfg.lambda));
    let total = g.add_all(&[desc_r, peak_a, peak_b, rep_scaled]);
    let breakdown = LossBreakdown {
        desc_r: val(g, desc_r),
        peak_r_a: val(g, peak_a),
        peak_r_b: val(g, peak_b),
        rep_r: val(g, rep),
        total: val(g, total),
        lambda: cfg.lambda,
        anchors: na,
        rep_patches: patches.len(),
        no_valid_patch: patches.is_empty(),
    };
    Ok(PairLoss {
        total,
        terms: LossTerms {
            desc_r,
            peak_r_a: peak_a,
            peak_r_b: peak_b,
            rep_r: rep,
        },
        breakdown,
        weights: DetachedWeights { c, a_a, a_b, b },
    })
}

/// `mean(w ⊙ x)` for a constant weight vector; 0 for empty input.
fn weighted_mean<T: Scalar>(g: &mut Graph<T>, w: &Tensor<T>, x: Var) -> Var {
    let w = g.constant(w.clone());
    let wx = g.mul(w, x);
    mean_or_zero(g, wx)
}

fn normalize_valid<T: Scalar>(mut map: Tensor<T>, mask: &Mask) -> Tensor<T> {
    let (_, c, _, _) = map.dims4();
    let hw = mask.h * mask.w;
    let eps = T::lit(crate::nn::NORMALIZE_EPS);
    for p in 0..hw {
        if !mask.data[p] {
            continue;
        }
        let norm = (0..c).map(|ch| map.data()[ch * hw + p].powi(2)).sum::<T>().sqrt().max(eps);
        for ch in 0..c {
            map.data_mut()[ch * hw + p] /= norm;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angular_distance_extremes() {
        let a = [1.0f64, 0.0];
        assert!(angular_distance(&a, &a) <= 4.5e-4);
        assert!((angular_distance(&a, &[0.0, 1.0]) - PI / 2.0).abs() < 1e-12);
        assert!((angular_distance(&a, &[-1.0, 0.0]) - PI).abs() < 4.5e-4);
    }

    #[test]
    fn risk_hand_values() {
        let h = PI / 2.0;
        assert_eq!(risk_from_angles(PI, PI, PI, PI, 0.0), 0.0);
        assert!((risk_from_angles(h, h, h, h, 0.0) - 54.79).abs() < 0.01);
        assert!((risk_from_angles(0.0, 0.0, 0.0, 0.0, PI) - 3506.9).abs() < 0.5);
    }

    #[test]
    fn weight_a_examples() {
        let w = weight_a(&Tensor::from_vec(&[2], vec![1.0f64, 3.0]));
        assert_eq!(w.data(), &[0.5, 0.0]);
        let eq = weight_a(&Tensor::from_vec(&[3], vec![2.0f64; 3]));
        assert!(eq.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_prior_step() {
        let img = Tensor::<f64>::from_fn(&[1, 1, 6, 10], |i| if i % 10 >= 5 { 1.0 } else { 0.0 });
        let m = edge_prior(&img);
        for y in 0..6 {
            for x in 0..10 {
                let v = m.data()[y * 10 + x];
                if x == 4 || x == 5 {
                    assert!(v < 1e-6);
                } else {
                    assert!((v - 1.0).abs() < 1e-6);
                }
            }
        }
        let flat = edge_prior(&Tensor::<f64>::full(&[1, 1, 4, 4], 0.3));
        assert!(flat.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn patch_grid_respects_mask() {
        let mut mask = Mask::full(40, 40, true);
        assert_eq!(patch_grid(&mask, 17, 8).len(), 9);
        mask.data[0] = false;
        assert_eq!(patch_grid(&mask, 17, 8).len(), 8);
        assert!(patch_grid(&Mask::full(16, 40, true), 17, 8).is_empty());
    }
}

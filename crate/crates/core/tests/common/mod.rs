//! Toy instances and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use mmfeat::features::KeypointSet;
use mmfeat::geometry::{CorrespondenceBatch, Homography};
use mmfeat::losses::{ImageFeatures, LossConfig, NegativeSet, PairInputs};
use mmfeat::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `n` random unit rows of dimension `c`.
pub fn unit_rows(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::from_vec(&[n, c], data)
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0 + 1e-7, 1.0 - 1e-7).acos()
}

/// O(n²) hard-negative search written directly from the definition.
pub fn brute_mine(da: &Tensor<f64>, db: &Tensor<f64>, ca: &[[f64; 2]], cb: &[[f64; 2]], radius: f64) -> NegativeSet {
    let (n, c) = (da.shape()[0], da.shape()[1]);
    let row = |t: &Tensor<f64>, i: usize| t.data()[i * c..(i + 1) * c].to_vec();
    let far = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() > radius;
    let argmin = |anchor: Vec<f64>, pool: &Tensor<f64>, coords: &[[f64; 2]], center: [f64; 2]| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for q in 0..n {
            if !far(coords[q], center) {
                continue;
            }
            let th = angle(&anchor, &row(pool, q));
            if best.is_none_or(|(b, _)| th < b) {
                best = Some((th, q));
            }
        }
        best.map(|(_, q)| q)
    };
    let mut out = NegativeSet::default();
    for i in 0..n {
        let j = argmin(row(da, i), da, ca, ca[i]);
        let k = argmin(row(db, i), db, cb, cb[i]);
        let nn = argmin(row(da, i), db, cb, cb[i]);
        let m = argmin(row(db, i), da, ca, ca[i]);
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

/// A small differentiable two-image problem: raw descriptor maps and score
/// logits for both images, plus images, homography and correspondences.
pub struct Toy {
    /// `[desc_a_raw, desc_b_raw, score_logit_a, score_logit_b]`.
    pub inputs: Vec<Tensor<f64>>,
    pub image_a: Tensor<f64>,
    pub image_b: Tensor<f64>,
    pub h: Homography,
    pub batch: CorrespondenceBatch,
    pub cfg: LossConfig,
}

impl Toy {
    pub fn new(seed: u64, size: usize, channels: usize) -> Self {
        let mut r = rng(seed);
        let inputs = vec![
            uniform(&[1, channels, size, size], -1.0, 1.0, &mut r),
            uniform(&[1, channels, size, size], -1.0, 1.0, &mut r),
            uniform(&[1, 1, size, size], -2.0, 2.0, &mut r),
            uniform(&[1, 1, size, size], -2.0, 2.0, &mut r),
        ];
        let center = [(size as f64 - 1.0) / 2.0; 2];
        let h = Homography::translation(0.3, 0.2).compose(&Homography::rotation_about(3.0, center)).unwrap();
        let lim = size as f64 - 1.0;
        let mut batch = CorrespondenceBatch {
            coords_a: vec![],
            coords_b: vec![],
            valid: vec![],
        };
        for y in 0..size {
            for x in 0..size {
                let p = h.project([x as f64, y as f64]).unwrap();
                batch.coords_a.push([x, y]);
                batch.coords_b.push(p);
                batch.valid.push(p[0] > 0.0 && p[1] > 0.0 && p[0] < lim && p[1] < lim);
            }
        }
        Self {
            inputs,
            image_a: uniform(&[1, 1, size, size], 0.0, 1.0, &mut r),
            image_b: uniform(&[1, 1, size, size], 0.0, 1.0, &mut r),
            h,
            batch,
            cfg: LossConfig {
                lambda: 8.0,
                safe_radius: 2.0,
                patch_size: 3,
                patch_stride: 2,
            },
        }
    }

    /// Unit descriptors and sigmoid scores for both images.
    pub fn features(g: &mut Graph<f64>, v: &[Var]) -> (ImageFeatures, ImageFeatures) {
        let da = g.l2_normalize_channels(v[0]);
        let db = g.l2_normalize_channels(v[1]);
        let sa = g.sigmoid(v[2]);
        let sb = g.sigmoid(v[3]);
        (
            ImageFeatures {
                descriptors: da,
                scores: sa,
            },
            ImageFeatures {
                descriptors: db,
                scores: sb,
            },
        )
    }

    pub fn pair(&self) -> PairInputs<'_, f64> {
        PairInputs {
            image_a: &self.image_a,
            image_b: &self.image_b,
            homography: &self.h,
            batch: &self.batch,
        }
    }
}

/// `side x side` map with ones at `(offset + period·k, offset + period·l)`.
pub fn comb_map(side: usize, offset: usize, period: usize) -> Tensor<f64> {
    Tensor::from_fn(&[1, 1, side, side], |i| {
        let (y, x) = (i / side, i % side);
        let on = |v: usize| v >= offset && (v - offset) % period == 0;
        if on(x) && on(y) {
            1.0
        } else {
            0.0
        }
    })
}

/// Keypoint selection written from its definition: a pixel is a candidate
/// if no 3x3 neighbour is higher and no earlier neighbour is equal; the
/// best remaining candidate (ties by raster order) is taken while farther
/// than `radius` from everything taken so far.
pub fn brute_select(scores: &[f32], h: usize, w: usize, k: usize, radius: f64, border: usize) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for y in border..h.saturating_sub(border) {
        for x in border..w.saturating_sub(border) {
            let s = scores[y * w + x];
            let mut ok = true;
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let q = scores[ny * w + nx];
                    let earlier = (ny, nx) < (y, x);
                    if q > s || (earlier && q == s) {
                        ok = false;
                    }
                }
            }
            if ok {
                cands.push((y, x));
            }
        }
    }
    let mut kept: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; cands.len()];
    while kept.len() < k {
        let mut best: Option<usize> = None;
        for (i, &(y, x)) in cands.iter().enumerate() {
            if used[i] {
                continue;
            }
            if best.is_none_or(|b| scores[y * w + x] > scores[cands[b].0 * w + cands[b].1]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        used[b] = true;
        let (y, x) = cands[b];
        if kept.iter().all(|&(ky, kx)| (ky as f64 - y as f64).powi(2) + (kx as f64 - x as f64).powi(2) > radius * radius) {
            kept.push((y, x));
        }
    }
    kept
}

/// Keypoints with the given coordinates and descriptors (rows of `dim`).
pub fn keypoints(coords: Vec<[f64; 2]>, descriptors: Vec<f32>, dim: usize, size: (usize, usize)) -> KeypointSet {
    KeypointSet {
        scores: vec![1.0; coords.len()],
        coords,
        descriptors,
        dim,
        image_size: size,
        shortfall: false,
    }
}

/// `n` random unit rows in f32.
pub fn unit_rows_f32(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    unit_rows(n, c, rng).data().iter().map(|&v| v as f32).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let lim = 1.0 - 1e-7;
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>().clamp(-lim, lim)
}

/// Mutual nearest neighbours by explicit double loops.
pub fn brute_match(a: &KeypointSet, b: &KeypointSet) -> Vec<[usize; 2]> {
    if a.is_empty() || b.is_empty() {
        return vec![];
    }
    let nn = |x: &KeypointSet, i: usize, y: &KeypointSet| -> usize {
        let mut best = 0;
        for j in 1..y.len() {
            if cosine(x.descriptor(i), y.descriptor(j)) > cosine(x.descriptor(i), y.descriptor(best)) {
                best = j;
            }
        }
        best
    };
    (0..a.len())
        .filter_map(|i| {
            let j = nn(a, i, b);
            (nn(b, j, a) == i).then_some([i, j])
        })
        .collect()
}

fn inside(p: [f64; 2], size: (usize, usize)) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= size.1 as f64 - 1.0 && p[1] <= size.0 as f64 - 1.0
}

pub fn brute_overlap(a: &KeypointSet, b: &KeypointSet, h: &Homography) -> (Vec<bool>, Vec<bool>) {
    let inv = h.inverse();
    let oa = a.coords.iter().map(|&p| h.project(p).is_ok_and(|q| inside(q, b.image_size))).collect();
    let ob = b.coords.iter().map(|&p| inv.project(p).is_ok_and(|q| inside(q, a.image_size))).collect();
    (oa, ob)
}

/// Greedy correspondence count: repeatedly take the closest unused pair of
/// overlap keypoints (ties by A index, then B index) while within `t`.
pub fn brute_corres(a: &KeypointSet, b: &KeypointSet, h: &Homography, t: f64) -> usize {
    let (oa, ob) = brute_overlap(a, b, h);
    let mut ua = vec![false; a.len()];
    let mut ub = vec![false; b.len()];
    let mut count = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..a.len() {
            if ua[i] || !oa[i] {
                continue;
            }
            let p = h.project(a.coords[i]).unwrap();
            for j in 0..b.len() {
                if ub[j] || !ob[j] {
                    continue;
                }
                let q = b.coords[j];
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                if d <= t && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { return count };
        ua[i] = true;
        ub[j] = true;
        count += 1;
    }
}

fn half_ratio(x: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        x as f64 / n as f64
    }
}

pub fn brute_rr(a: &KeypointSet, b: &KeypointSet, h: &Homography, t: f64) -> f64 {
    let (oa, ob) = brute_overlap(a, b, h);
    let c = brute_corres(a, b, h, t);
    let na = oa.iter().filter(|&&v| v).count();
    let nb = ob.iter().filter(|&&v| v).count();
    0.5 * (half_ratio(c, na) + half_ratio(c, nb))
}

pub fn brute_ms(matches: &[[usize; 2]], a: &KeypointSet, b: &KeypointSet, h: &Homography, t: f64) -> f64 {
    let (oa, ob) = brute_overlap(a, b, h);
    let mut correct = 0;
    for &[i, j] in matches {
        if oa[i] && ob[j] {
            let p = h.project(a.coords[i]).unwrap();
            let q = b.coords[j];
            if ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() <= t {
                correct += 1;
            }
        }
    }
    let na = oa.iter().filter(|&&v| v).count();
    let nb = ob.iter().filter(|&&v| v).count();
    0.5 * (half_ratio(correct, na) + half_ratio(correct, nb))
}

/// Homography with mild perspective: rotation, scale and shift about the
/// center of a `size x size` image plus small projective terms.
pub fn random_homography(size: f64, rng: &mut ChaCha8Rng) -> Homography {
    let c = [size / 2.0, size / 2.0];
    let r = Homography::rotation_about(rng.random_range(-20.0..20.0), c);
    let s = Homography::scaling_about(rng.random_range(0.85..1.15), c);
    let p = Homography::from_rows([
        [1.0, 0.0, rng.random_range(-8.0..8.0)],
        [0.0, 1.0, rng.random_range(-8.0..8.0)],
        [rng.random_range(-3e-4..3e-4), rng.random_range(-3e-4..3e-4), 1.0],
    ])
    .unwrap();
    p.compose(&r).unwrap().compose(&s).unwrap()
}

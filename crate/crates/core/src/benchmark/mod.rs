//! Matching and registration benchmark: ground-truth correspondences,
//! repeatable rate (RR), matching score (MS), RANSAC registration, RE_H /
//! RE_M and the successful registration rate (SRR).
//!
//! Pairs without a stored homography or landmarks are treated as aligned
//! and turned into a test pair by warping image B with a random homography
//! drawn per pair from the seed and the pair id. Pairs with landmarks but
//! no homography use a least-squares homography fitted to the landmarks as
//! the reference for RR and MS and are scored by RE_M only.

mod plot;
mod report;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{format_landmarks, parse_landmarks, PairData, PairSlot};
use crate::error::{Error, Result};
use crate::features::{match_bidirectional, select_keypoints, KeypointSet, MatchSet, DEFAULT_BORDER, DEFAULT_NMS_RADIUS};
use crate::geometry::{sample_homography, warp_image, Homography, TransformConfig};
use crate::image_io::to_channels;
use crate::model::Model;
use crate::tensor::Tensor;

pub use plot::{bar_chart_svg, line_chart_svg, write_plots, Series};
pub use report::{BenchmarkReport, PairRow, Skipped, Summary};

pub const DEFAULT_K: usize = 1024;
pub const SUCCESS_THRESHOLD: f64 = 10.0;
pub const RANSAC_THRESHOLD: f64 = 10.0;
pub const RANSAC_ITERATIONS: usize = 100_000;

/// Pixel thresholds 1..=10.
pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}

fn inside(p: [f64; 2], size: (usize, usize)) -> bool {
    let (h, w) = size;
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= w as f64 - 1.0 && p[1] <= h as f64 - 1.0
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Keypoints of each image whose ground-truth projection lands inside the
/// other image, plus the projections of A's keypoints into B.
#[derive(Clone, Debug)]
pub struct Overlap {
    pub a: Vec<bool>,
    pub b: Vec<bool>,
    pub projected_a: Vec<Option<[f64; 2]>>,
}

impl Overlap {
    pub fn new(kp_a: &KeypointSet, kp_b: &KeypointSet, h: &Homography) -> Self {
        let inv = h.inverse();
        let projected_a: Vec<Option<[f64; 2]>> = kp_a.coords.iter().map(|&p| h.project(p).ok()).collect();
        let a = projected_a.iter().map(|p| p.is_some_and(|p| inside(p, kp_b.image_size))).collect();
        let b = kp_b.coords.iter().map(|&p| inv.project(p).is_ok_and(|q| inside(q, kp_a.image_size))).collect();
        Self { a, b, projected_a }
    }

    pub fn count_a(&self) -> usize {
        self.a.iter().filter(|&&v| v).count()
    }

    pub fn count_b(&self) -> usize {
        self.b.iter().filter(|&&v| v).count()
    }

    /// `½ (x / |A ∩ overlap| + x / |B ∩ overlap|)`, an empty side adding 0.
    pub fn symmetric_ratio(&self, x: usize) -> f64 {
        let half = |n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        0.5 * (half(self.count_a()) + half(self.count_b()))
    }
}

/// Ground-truth correspondence counts at each threshold. Only keypoints in
/// the overlap take part; candidate pairs are taken nearest first (ties by
/// A index, then B index) and each keypoint is used at most once.
pub fn correspondence_counts(kp_a: &KeypointSet, kp_b: &KeypointSet, h: &Homography, thresholds: &[f64]) -> Vec<usize> {
    assert!(thresholds.iter().all(|&t| t > 0.0), "thresholds must be positive");
    let ov = Overlap::new(kp_a, kp_b, h);
    correspondence_counts_in(&ov, kp_b, thresholds)
}

fn correspondence_counts_in(ov: &Overlap, kp_b: &KeypointSet, thresholds: &[f64]) -> Vec<usize> {
    let tmax = thresholds.iter().copied().fold(0.0, f64::max);
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in ov.projected_a.iter().enumerate() {
        let Some(p) = p.filter(|_| ov.a[i]) else { continue };
        for (j, &q) in kp_b.coords.iter().enumerate() {
            if ov.b[j] {
                let d = dist(p, q);
                if d <= tmax {
                    cand.push((d, i, j));
                }
            }
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; ov.a.len()];
    let mut used_b = vec![false; ov.b.len()];
    let mut accepted = Vec::new();
    for (d, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            accepted.push(d);
        }
    }
    thresholds.iter().map(|&t| accepted.iter().filter(|&&d| d <= t).count()).collect()
}

pub fn count_correspondences(kp_a: &KeypointSet, kp_b: &KeypointSet, h: &Homography, t: f64) -> usize {
    correspondence_counts(kp_a, kp_b, h, &[t])[0]
}

pub fn repeatable_rate(kp_a: &KeypointSet, kp_b: &KeypointSet, h: &Homography, t: f64) -> f64 {
    let ov = Overlap::new(kp_a, kp_b, h);
    ov.symmetric_ratio(correspondence_counts_in(&ov, kp_b, &[t])[0])
}

fn correct_counts_in(ov: &Overlap, matches: &MatchSet, kp_b: &KeypointSet, thresholds: &[f64]) -> Vec<usize> {
    let errs: Vec<f64> = matches
        .pairs
        .iter()
        .filter(|&&[i, j]| ov.a[i] && ov.b[j])
        .filter_map(|&[i, j]| ov.projected_a[i].map(|p| dist(p, kp_b.coords[j])))
        .collect();
    thresholds.iter().map(|&t| errs.iter().filter(|&&e| e <= t).count()).collect()
}

/// Matches between overlap keypoints whose reprojection error is at most
/// `t`, at each threshold.
pub fn correct_match_counts(matches: &MatchSet, kp_a: &KeypointSet, kp_b: &KeypointSet, h: &Homography, thresholds: &[f64]) -> Vec<usize> {
    let ov = Overlap::new(kp_a, kp_b, h);
    correct_match_counts_checked(&ov, matches, kp_b, thresholds)
}

fn correct_match_counts_checked(ov: &Overlap, matches: &MatchSet, kp_b: &KeypointSet, thresholds: &[f64]) -> Vec<usize> {
    assert!(thresholds.iter().all(|&t| t > 0.0), "thresholds must be positive");
    correct_counts_in(ov, matches, kp_b, thresholds)
}

pub fn matching_score(matches: &MatchSet, kp_a: &KeypointSet, kp_b: &KeypointSet, h: &Homography, t: f64) -> f64 {
    let ov = Overlap::new(kp_a, kp_b, h);
    ov.symmetric_ratio(correct_match_counts_checked(&ov, matches, kp_b, &[t])[0])
}

/// Mean matching score when every descriptor is replaced by a random unit
/// vector, over `trials` draws. Estimates the chance level of MS for a
/// given pair of keypoint sets.
pub fn chance_matching_score<R: Rng + ?Sized>(kp_a: &KeypointSet, kp_b: &KeypointSet, h: &Homography, t: f64, trials: usize, rng: &mut R) -> f64 {
    let randomize = |kp: &KeypointSet, rng: &mut R| {
        let mut out = kp.clone();
        for row in out.descriptors.chunks_mut(kp.dim.max(1)) {
            row.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0f32));
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        out
    };
    let mut total = 0.0;
    for _ in 0..trials {
        let (a, b) = (randomize(kp_a, rng), randomize(kp_b, rng));
        total += matching_score(&match_bidirectional(&a, &b), &a, &b, h, t);
    }
    total / trials.max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub threshold: f64,
    pub iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: RANSAC_THRESHOLD,
            iterations: RANSAC_ITERATIONS,
        }
    }
}

/// Similarity transform taking the points to zero mean and mean distance
/// √2 from the origin. `None` for coincident points.
fn normalizer(pts: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let md = pts.iter().map(|p| dist(*p, [cx, cy])).sum::<f64>() / n;
    if !(md > 1e-12) || !md.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / md;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    [t[(0, 0)] * p[0] + t[(0, 2)], t[(1, 1)] * p[1] + t[(1, 2)]]
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs() < 1e-8
}

/// Any three of four (normalized) points on a line.
fn degenerate(q: &[[f64; 2]; 4]) -> bool {
    collinear(q[0], q[1], q[2]) || collinear(q[0], q[1], q[3]) || collinear(q[0], q[2], q[3]) || collinear(q[1], q[2], q[3])
}

/// Exact homography through four correspondences, solved in normalized
/// coordinates.
fn minimal_dlt(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Option<Homography> {
    let ts = normalizer(src)?;
    let td = normalizer(dst)?;
    let s = src.map(|p| apply(&ts, p));
    let d = dst.map(|p| apply(&td, p));
    if degenerate(&s) || degenerate(&d) {
        return None;
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let [x, y] = s[k];
        let [u, v] = d[k];
        a.row_mut(2 * k).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(2 * k + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[2 * k] = u;
        b[2 * k + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    Homography::new(td.try_inverse()? * hn * ts).ok()
}

/// Least-squares DLT over `n ≥ 4` correspondences with Hartley
/// normalization: the right singular vector of the smallest singular value.
pub fn fit_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::Registration(format!("least-squares fit needs at least 4 correspondences, got {n}")));
    }
    let fail = || Error::Registration("degenerate correspondences".into());
    let ts = normalizer(src).ok_or_else(fail)?;
    let td = normalizer(dst).ok_or_else(fail)?;
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for k in 0..n {
        let [x, y] = apply(&ts, src[k]);
        let [u, v] = apply(&td, dst[k]);
        a.row_mut(2 * k).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]);
        a.row_mut(2 * k + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v]);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(fail)?;
    let (imin, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).ok_or_else(fail)?;
    let h = vt.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    Homography::new(td.try_inverse().ok_or_else(fail)? * hn * ts)
}

fn inlier_mask(h: &Homography, src: &[[f64; 2]], dst: &[[f64; 2]], threshold: f64) -> Vec<bool> {
    let m = h.matrix();
    let t2 = threshold * threshold;
    src.iter()
        .zip(dst)
        .map(|(p, q)| {
            let z = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
            if z.abs() < 1e-12 {
                return false;
            }
            let x = (m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)]) / z;
            let y = (m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)]) / z;
            (x - q[0]).powi(2) + (y - q[1]).powi(2) <= t2
        })
        .collect()
}

/// RANSAC over point correspondences: `iterations` minimal samples, the
/// model with the most inliers (first found on ties) is refitted by least
/// squares on its inliers. Sampling stops early once a model explains
/// every correspondence.
pub fn ransac_homography<R: Rng + ?Sized>(src: &[[f64; 2]], dst: &[[f64; 2]], cfg: &RansacConfig, rng: &mut R) -> Result<Homography> {
    let n = src.len();
    assert_eq!(n, dst.len(), "correspondence lists differ in length");
    if n < 4 {
        return Err(Error::Registration(format!("{n} matches, at least 4 required")));
    }
    let mut best: Option<(usize, Homography)> = None;
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(rng, n, 4);
        let s = [src[idx.index(0)], src[idx.index(1)], src[idx.index(2)], src[idx.index(3)]];
        let d = [dst[idx.index(0)], dst[idx.index(1)], dst[idx.index(2)], dst[idx.index(3)]];
        let Some(h) = minimal_dlt(&s, &d) else { continue };
        let count = inlier_mask(&h, src, dst, cfg.threshold).iter().filter(|&&v| v).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
            if count == n {
                break;
            }
        }
    }
    let (_, h) = best.ok_or_else(|| Error::Registration("every minimal sample was degenerate".into()))?;
    let mask = inlier_mask(&h, src, dst, cfg.threshold);
    let (s, d): (Vec<_>, Vec<_>) = src.iter().zip(dst).zip(&mask).filter(|(_, &m)| m).map(|((p, q), _)| (*p, *q)).unzip();
    Ok(fit_homography(&s, &d).unwrap_or(h))
}

/// RANSAC on the keypoint coordinates of `matches`.
pub fn estimate_homography<R: Rng + ?Sized>(matches: &MatchSet, kp_a: &KeypointSet, kp_b: &KeypointSet, cfg: &RansacConfig, rng: &mut R) -> Result<Homography> {
    let src: Vec<_> = matches.pairs.iter().map(|&[i, _]| kp_a.coords[i]).collect();
    let dst: Vec<_> = matches.pairs.iter().map(|&[_, j]| kp_b.coords[j]).collect();
    ransac_homography(&src, &dst, cfg, rng)
}

/// `‖flatten(H_gt) − flatten(H_est)‖₂`, both with `h33 = 1`.
pub fn re_h(h_gt: &Homography, h_est: &Homography) -> f64 {
    let (a, b) = (h_gt.flatten(), h_est.flatten());
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean landmark reprojection error; infinite if a landmark maps to
/// infinity.
pub fn re_m(h_est: &Homography, landmarks: &[[f64; 4]]) -> f64 {
    let mut total = 0.0;
    for l in landmarks {
        match h_est.project([l[0], l[1]]) {
            Ok(p) => total += dist(p, [l[2], l[3]]),
            Err(_) => return f64::INFINITY,
        }
    }
    total / landmarks.len().max(1) as f64
}

/// Reference geometry of an evaluation pair.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Maps A pixels onto B pixels; used for RR and MS.
    pub homography: Homography,
    /// The homography is the true transform (RE_H applies) rather than a
    /// fit to landmarks.
    pub exact: bool,
    pub landmarks: Option<Vec<[f64; 4]>>,
}

/// A pair ready for extraction: B already warped where the protocol asks
/// for it.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub image_a: Tensor<f32>,
    pub modality_a: String,
    pub image_b: Tensor<f32>,
    pub modality_b: String,
    pub gt: GroundTruth,
}

fn id_stream(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Per-pair generator for the test warp.
pub fn warp_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id_stream(id));
    r
}

/// Per-pair generator for RANSAC, independent of how features were made.
pub fn ransac_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5241_4e53_4143_0001);
    r.set_stream(id_stream(id));
    r
}

pub fn prepare_pair(data: PairData, transform: &TransformConfig, seed: u64) -> Result<EvalPair> {
    let size = |t: &Tensor<f32>| (t.shape()[2], t.shape()[3]);
    let (image_b, gt) = match (data.homography, data.landmarks) {
        (Some(h), landmarks) => (data.image_b, GroundTruth { homography: h, exact: true, landmarks }),
        (None, Some(lm)) => {
            let src: Vec<_> = lm.iter().map(|l| [l[0], l[1]]).collect();
            let dst: Vec<_> = lm.iter().map(|l| [l[2], l[3]]).collect();
            let h = fit_homography(&src, &dst)?;
            (data.image_b, GroundTruth { homography: h, exact: false, landmarks: Some(lm) })
        }
        (None, None) => {
            if size(&data.image_a) != size(&data.image_b) {
                return Err(Error::Config(format!("pair `{}` has no ground truth and differently sized images", data.id)));
            }
            let sb = size(&data.image_b);
            let h = sample_homography(transform, sb, &mut warp_rng(seed, &data.id))?;
            let (warped, _) = warp_image(&data.image_b, &h, sb);
            (warped, GroundTruth { homography: h, exact: true, landmarks: None })
        }
    };
    Ok(EvalPair {
        id: data.id,
        image_a: data.image_a,
        modality_a: data.modality_a,
        image_b,
        modality_b: data.modality_b,
        gt,
    })
}

/// Benchmark settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub k: usize,
    pub thresholds: Vec<f64>,
    pub success_threshold: f64,
    pub ransac: RansacConfig,
    pub nms_radius: f64,
    pub border: usize,
    /// Random warp applied to aligned pairs.
    pub transform: TransformConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            thresholds: default_thresholds(),
            success_threshold: SUCCESS_THRESHOLD,
            ransac: RansacConfig::default(),
            nms_radius: DEFAULT_NMS_RADIUS,
            border: DEFAULT_BORDER,
            transform: TransformConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("benchmark needs k >= 1 and positive thresholds".into()));
        }
        if !(self.success_threshold > 0.0) || !(self.ransac.threshold > 0.0) || self.ransac.iterations == 0 {
            return Err(Error::Config("success threshold, RANSAC threshold and iterations must be positive".into()));
        }
        self.transform.validate()
    }
}

/// All metrics of one pair.
pub fn evaluate_pair(id: &str, kp_a: &KeypointSet, kp_b: &KeypointSet, gt: &GroundTruth, cfg: &BenchmarkConfig) -> Result<PairRow> {
    if kp_a.dim != kp_b.dim {
        return Err(Error::format("features", format!("descriptor dimensions differ ({} vs {})", kp_a.dim, kp_b.dim)));
    }
    let ov = Overlap::new(kp_a, kp_b, &gt.homography);
    let corres = correspondence_counts_in(&ov, kp_b, &cfg.thresholds);
    let matches = match_bidirectional(kp_a, kp_b);
    let correct = correct_counts_in(&ov, &matches, kp_b, &cfg.thresholds);
    let est = estimate_homography(&matches, kp_a, kp_b, &cfg.ransac, &mut ransac_rng(cfg.seed, id)).ok();
    let re_h_v = gt.exact.then(|| est.as_ref().map_or(f64::INFINITY, |h| re_h(&gt.homography, h)));
    let re_m_v = gt.landmarks.as_ref().map(|lm| est.as_ref().map_or(f64::INFINITY, |h| re_m(h, lm)));
    Ok(PairRow {
        pair_id: id.to_string(),
        n_kp_a: kp_a.len(),
        n_kp_b: kp_b.len(),
        overlap_a: ov.count_a(),
        overlap_b: ov.count_b(),
        matches: matches.len(),
        rr: corres.iter().map(|&c| ov.symmetric_ratio(c)).collect(),
        ms: correct.iter().map(|&c| ov.symmetric_ratio(c)).collect(),
        corres,
        correct,
        registered: est.is_some(),
        re_h: re_h_v,
        re_m: re_m_v,
    })
}

/// Source of keypoints for the benchmark.
pub trait Extractor: Sync {
    fn extract(&self, image: &Tensor<f32>, modality: &str, k: usize) -> Result<KeypointSet>;
}

/// A trained model followed by keypoint selection.
pub struct ModelExtractor<'a> {
    pub model: &'a Model<f32>,
    pub nms_radius: f64,
    pub border: usize,
}

impl Extractor for ModelExtractor<'_> {
    fn extract(&self, image: &Tensor<f32>, modality: &str, k: usize) -> Result<KeypointSet> {
        let channels = self.model.config.modality(modality)?.channels;
        let dense = self.model.infer(&to_channels(image, channels)?, modality)?;
        Ok(select_keypoints(&dense, k, self.nms_radius, self.border))
    }
}

/// `f` over `items` on `workers` threads; results keep the input order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let o = f(&items[i]);
                out.lock().expect("worker panicked")[i] = Some(o);
            });
        }
    });
    out.into_inner().expect("worker panicked").into_iter().map(|o| o.expect("every item processed")).collect()
}

fn collect(results: Vec<(String, std::result::Result<PairRow, String>)>, cfg: &BenchmarkConfig) -> BenchmarkReport {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(reason) => skipped.push(Skipped { pair_id: id, reason }),
        }
    }
    BenchmarkReport::new(cfg.thresholds.clone(), cfg.success_threshold, rows, skipped)
}

/// Extract, match, register and score every readable pair.
pub fn run_benchmark(slots: &[PairSlot], extractor: &dyn Extractor, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let results = parallel_map(slots, cfg.workers, |slot| {
        let run = || -> Result<PairRow> {
            let data = slot.data.clone().map_err(Error::Config)?;
            let pair = prepare_pair(data, &cfg.transform, cfg.seed)?;
            let kp_a = extractor.extract(&pair.image_a, &pair.modality_a, cfg.k)?;
            let kp_b = extractor.extract(&pair.image_b, &pair.modality_b, cfg.k)?;
            evaluate_pair(&pair.id, &kp_a, &kp_b, &pair.gt, cfg)
        };
        (slot.id.clone(), run().map_err(|e| e.to_string()))
    });
    Ok(collect(results, cfg))
}

/// One pair in a feature manifest: two feature files plus the ground truth
/// they are scored against. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePairEntry {
    pub id: String,
    pub features_a: PathBuf,
    pub features_b: PathBuf,
    /// Homography file mapping A onto B.
    pub homography: PathBuf,
    /// Whether the homography is the true transform rather than a landmark
    /// fit.
    pub exact: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    #[serde(default, rename = "pair")]
    pub pairs: Vec<FeaturePairEntry>,
}

impl FeatureManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format("feature manifest", e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format("feature manifest", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Write the ground truth of `pair` next to its feature files and return
/// the manifest entry (paths relative to `dir`).
pub fn write_ground_truth(dir: &Path, id: &str, gt: &GroundTruth, features_a: PathBuf, features_b: PathBuf) -> Result<FeaturePairEntry> {
    let h_name = PathBuf::from(format!("{id}.homography.txt"));
    gt.homography.write(&dir.join(&h_name))?;
    let landmarks = match &gt.landmarks {
        Some(lm) => {
            let name = PathBuf::from(format!("{id}.landmarks.txt"));
            let path = dir.join(&name);
            std::fs::write(&path, format_landmarks(lm)).map_err(|e| Error::io(&path, e))?;
            Some(name)
        }
        None => None,
    };
    Ok(FeaturePairEntry {
        id: id.to_string(),
        features_a,
        features_b,
        homography: h_name,
        exact: gt.exact,
        landmarks,
    })
}

/// Score pairs from stored feature files. Unreadable or corrupt entries
/// are skipped with their reason.
pub fn run_from_features(manifest_path: &Path, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let manifest = FeatureManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let results = parallel_map(&manifest.pairs, cfg.workers, |e| {
        let run = || -> Result<PairRow> {
            let (kp_a, _) = KeypointSet::load(&base.join(&e.features_a))?;
            let (kp_b, _) = KeypointSet::load(&base.join(&e.features_b))?;
            let homography = Homography::read(&base.join(&e.homography))?;
            let landmarks = match &e.landmarks {
                Some(p) => {
                    let path = base.join(p);
                    Some(parse_landmarks(&std::fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?)?)
                }
                None => None,
            };
            let gt = GroundTruth { homography, exact: e.exact, landmarks };
            evaluate_pair(&e.id, &kp_a.truncated(cfg.k), &kp_b.truncated(cfg.k), &gt, cfg)
        };
        (e.id.clone(), run().map_err(|err| err.to_string()))
    });
    Ok(collect(results, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kps(coords: Vec<[f64; 2]>, size: (usize, usize)) -> KeypointSet {
        let n = coords.len();
        let mut descriptors = vec![0.0f32; n * 4];
        for i in 0..n {
            descriptors[i * 4 + i % 4] = 1.0;
        }
        KeypointSet {
            scores: vec![1.0; n],
            coords,
            descriptors,
            dim: 4,
            image_size: size,
            shortfall: false,
        }
    }

    #[test]
    fn identity_repeat_is_perfect() {
        let a = kps(vec![[3.0, 4.0], [10.0, 10.0], [20.0, 5.0]], (32, 32));
        let h = Homography::identity();
        assert_eq!(count_correspondences(&a, &a, &h, 3.0), 3);
        assert_eq!(repeatable_rate(&a, &a, &h, 3.0), 1.0);
    }

    #[test]
    fn far_projections_do_not_correspond() {
        let a = kps(vec![[3.0, 4.0], [10.0, 10.0]], (32, 32));
        let b = kps(vec![[25.0, 25.0], [30.0, 2.0]], (32, 32));
        assert_eq!(count_correspondences(&a, &b, &Homography::identity(), 3.0), 0);
        assert_eq!(repeatable_rate(&a, &b, &Homography::identity(), 3.0), 0.0);
    }

    #[test]
    fn greedy_assignment_is_one_to_one() {
        // Two A points near one B point: only the nearer one corresponds.
        let a = kps(vec![[10.0, 10.0], [11.5, 10.0]], (32, 32));
        let b = kps(vec![[11.0, 10.0]], (32, 32));
        let h = Homography::identity();
        assert_eq!(count_correspondences(&a, &b, &h, 3.0), 1);
        assert!((repeatable_rate(&a, &b, &h, 3.0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn overlap_uses_projection() {
        let a = kps(vec![[2.0, 2.0], [25.0, 25.0]], (32, 32));
        let b = kps(vec![[12.0, 12.0], [5.0, 5.0]], (32, 32));
        let ov = Overlap::new(&a, &b, &Homography::translation(10.0, 10.0));
        assert_eq!(ov.a, vec![true, false]);
        assert_eq!(ov.b, vec![true, false]);
    }

    #[test]
    fn matching_score_counts_correct_matches() {
        let a = kps(vec![[3.0, 4.0], [10.0, 10.0], [20.0, 5.0], [25.0, 25.0]], (32, 32));
        let h = Homography::identity();
        let all = MatchSet {
            pairs: vec![[0, 0], [1, 1], [2, 2], [3, 3]],
            distances: vec![0.0; 4],
        };
        assert_eq!(matching_score(&all, &a, &a, &h, 3.0), 1.0);
        let crossed = MatchSet {
            pairs: vec![[0, 1], [1, 0], [2, 2]],
            distances: vec![0.0; 3],
        };
        assert!((matching_score(&crossed, &a, &a, &h, 3.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn re_h_examples() {
        let g = Homography::rotation_about(7.0, [40.0, 30.0]);
        assert_eq!(re_h(&g, &g), 0.0);
        let mut r = g.rows();
        r[0][2] += 0.1;
        let p = Homography::from_rows(r).unwrap();
        assert!((re_h(&g, &p) - 0.1).abs() < 1e-12);
        assert_eq!(re_h(&g, &p), re_h(&p, &g));
    }

    #[test]
    fn re_m_examples() {
        let h = Homography::translation(2.0, -1.0);
        let lm: Vec<[f64; 4]> = (0..5).map(|i| [i as f64, 2.0 * i as f64, i as f64 + 2.0, 2.0 * i as f64 - 1.0]).collect();
        assert!(re_m(&h, &lm) < 1e-12);
        let mut lm = vec![[0.0, 0.0, 0.0, 0.0]; 4];
        lm[2] = [5.0, 5.0, 8.0, 5.0];
        assert!((re_m(&Homography::identity(), &lm) - 0.75).abs() < 1e-12);
        assert!((re_m(&Homography::identity(), &[[1.0, 1.0, 4.0, 1.0]]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn three_matches_fail() {
        let src = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let r = ransac_homography(&src, &src, &RansacConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Registration(_))));
    }

    #[test]
    fn collinear_points_fail() {
        let src: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let cfg = RansacConfig { iterations: 50, ..Default::default() };
        assert!(ransac_homography(&src, &src, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn least_squares_fit_is_exact_on_clean_data() {
        let h = Homography::from_rows([[0.9, 0.1, 12.0], [-0.05, 1.1, -4.0], [1e-4, -2e-4, 1.0]]).unwrap();
        let src: Vec<[f64; 2]> = (0..12).map(|i| [(i * 37 % 200) as f64, (i * 53 % 150) as f64]).collect();
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| h.project(p).unwrap()).collect();
        assert!(re_h(&h, &fit_homography(&src, &dst).unwrap()) < 1e-9);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        assert_eq!(parallel_map(&items, 4, |&i| i * i), items.iter().map(|i| i * i).collect::<Vec<_>>());
    }
}

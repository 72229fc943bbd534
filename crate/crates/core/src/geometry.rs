//! Planar homographies, image/map warping and ground-truth correspondences.
//!
//! Coordinates are `(x, y)` in pixels, x to the right, y down, origin at the
//! center of the top-left pixel.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::bilinear_taps;
use crate::tensor::{Scalar, Tensor};

const MIN_DET: f64 = 1e-8;
const MIN_DEPTH: f64 = 1e-12;
const MAX_RESAMPLES: usize = 16;
/// Slack on image-bound tests so exact round trips of border pixels stay
/// inside.
const BOUND_SLACK: f64 = 1e-9;

/// 3x3 projective transform with `h33 == 1` and `|det| > 1e-8`.
#[derive(Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl fmt::Debug for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Homography{:?}", self.rows())
    }
}

impl Homography {
    /// Normalize to `h33 = 1` and check invertibility.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let h33 = m[(2, 2)];
        if !h33.is_finite() || h33.abs() < MIN_DEPTH || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularHomography { det: 0.0 });
        }
        let m = m / h33;
        let det = m.determinant();
        if det.abs() <= MIN_DET || !det.is_finite() {
            return Err(Error::SingularHomography { det });
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    /// Panics on a zero scale factor.
    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self::from_rows([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]]).expect("zero scale")
    }

    /// Rotation by `deg` degrees (clockwise on screen, since y points down)
    /// about `center`.
    pub fn rotation_about(deg: f64, center: [f64; 2]) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let to = Self::translation(center[0], center[1]).0;
        let from = Self::translation(-center[0], -center[1]).0;
        Self(to * r * from)
    }

    /// Uniform scaling by `k` about `center`.
    pub fn scaling_about(k: f64, center: [f64; 2]) -> Self {
        let to = Self::translation(center[0], center[1]).0;
        let from = Self::translation(-center[0], -center[1]).0;
        Self(to * Self::scaling(k, k).0 * from)
    }

    /// Exact homography mapping four source points onto four destination
    /// points.
    pub fn from_four_points(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Self> {
        let mut a = DMatrix::<f64>::zeros(8, 8);
        let mut b = nalgebra::DVector::<f64>::zeros(8);
        for k in 0..4 {
            let [x, y] = src[k];
            let [u, v] = dst[k];
            a.row_mut(2 * k).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(2 * k + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[2 * k] = u;
            b[2 * k + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or(Error::SingularHomography { det: 0.0 })?;
        Self::new(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Row-major entries.
    pub fn flatten(&self) -> [f64; 9] {
        let r = self.rows();
        [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]]
    }

    pub fn inverse(&self) -> Self {
        let inv = self.0.try_inverse().expect("homography invariant guarantees invertibility");
        Self::new(inv).expect("inverse of an invertible homography")
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.0 * other.0)
    }

    pub fn project(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let v = self.0 * Vector3::new(p[0], p[1], 1.0);
        if v[2].abs() < MIN_DEPTH {
            return Err(Error::PointAtInfinity { x: p[0], y: p[1] });
        }
        Ok([v[0] / v[2], v[1] / v[2]])
    }

    /// Three lines of three whitespace-separated numbers, row-major.
    pub fn to_text(&self) -> String {
        self.rows()
            .iter()
            .map(|r| format!("{} {} {}\n", r[0], r[1], r[2]))
            .collect()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("homography file", e.to_string()))?;
        let lines = text.lines().filter(|l| !l.trim().is_empty()).count();
        if values.len() != 9 || lines != 3 {
            return Err(Error::format(
                "homography file",
                format!("expected 3 lines of 3 numbers, got {} numbers on {lines} lines", values.len()),
            ));
        }
        Self::new(Matrix3::from_row_slice(&values))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Ranges of the random transforms used for training augmentation and for
/// generating benchmark pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    /// Corner jitter as a fraction of the image size.
    pub distortion_scale: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub seed: u64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            distortion_scale: [0.0, 0.2],
            rotation_deg: [-10.0, 10.0],
            scale: [0.8, 1.0],
            seed: 0,
        }
    }
}

impl TransformConfig {
    /// All-identity ranges.
    pub fn identity() -> Self {
        Self {
            distortion_scale: [0.0, 0.0],
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ok(self.distortion_scale) || !ok(self.rotation_deg) || !ok(self.scale) {
            return Err(Error::Config(format!("empty or non-finite transform interval in {self:?}")));
        }
        if self.distortion_scale[0] < 0.0 || self.distortion_scale[1] >= 1.0 {
            return Err(Error::Config("distortion_scale must lie in [0, 1)".into()));
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::Config("scale lower bound must be positive".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Center of an `h x w` pixel grid.
pub fn image_center(h: usize, w: usize) -> [f64; 2] {
    [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0]
}

/// Corners of an `h x w` pixel grid, clockwise from the top-left.
pub fn image_corners(h: usize, w: usize) -> [[f64; 2]; 4] {
    let (x1, y1) = (w as f64 - 1.0, h as f64 - 1.0);
    [[0.0, 0.0], [x1, 0.0], [x1, y1], [0.0, y1]]
}

/// Random `H = P · R · S`: `S` scales and `R` rotates about the image
/// center, then `P` displaces each of the four transformed corners by an
/// independent uniform offset in `±d·(w, h)` with `d` drawn from
/// `distortion_scale`.
pub fn sample_homography<R: Rng + ?Sized>(config: &TransformConfig, image_size: (usize, usize), rng: &mut R) -> Result<Homography> {
    config.validate()?;
    let (h, w) = image_size;
    if h == 0 || w == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let center = image_center(h, w);
    for _ in 0..MAX_RESAMPLES {
        let k = uniform(rng, config.scale);
        let deg = uniform(rng, config.rotation_deg);
        let d = uniform(rng, config.distortion_scale);
        let rs = Homography::rotation_about(deg, center).0 * Homography::scaling_about(k, center).0;
        let rs = Homography(rs);
        let corners = image_corners(h, w);
        let moved: Vec<[f64; 2]> = corners.iter().map(|&c| rs.project(c)).collect::<Result<_>>()?;
        let src = [moved[0], moved[1], moved[2], moved[3]];
        let mut dst = src;
        for p in dst.iter_mut() {
            p[0] += uniform(rng, [-d * w as f64, d * w as f64]);
            p[1] += uniform(rng, [-d * h as f64, d * h as f64]);
        }
        if !is_convex_quad(&dst) {
            continue;
        }
        let Ok(p) = Homography::from_four_points(&src, &dst) else {
            continue;
        };
        if let Ok(hm) = p.compose(&rs) {
            return Ok(hm);
        }
    }
    Err(Error::DegenerateHomography {
        attempts: MAX_RESAMPLES,
    })
}

/// Strictly convex with consistent winding and no three collinear corners.
fn is_convex_quad(q: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() < 1e-6 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Per-pixel validity of a warped map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(h: usize, w: usize, v: bool) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask size mismatch");
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }
}

pub(crate) fn inside(p: [f64; 2], h: usize, w: usize) -> bool {
    p[0] >= -BOUND_SLACK && p[1] >= -BOUND_SLACK && p[0] <= w as f64 - 1.0 + BOUND_SLACK && p[1] <= h as f64 - 1.0 + BOUND_SLACK
}

/// For every pixel of an `out_h x out_w` grid, the source location
/// `H⁻¹·p` in a map of size `src_h x src_w`, and whether it lies inside.
/// Points at infinity yield NaN sources.
pub fn warp_sources(h: &Homography, src_size: (usize, usize), out_size: (usize, usize)) -> (Vec<[f64; 2]>, Mask) {
    let inv = h.inverse();
    let (oh, ow) = out_size;
    let mut sources = Vec::with_capacity(oh * ow);
    let mut mask = Mask::full(oh, ow, false);
    for y in 0..oh {
        for x in 0..ow {
            match inv.project([x as f64, y as f64]) {
                Ok(p) => {
                    mask.data[y * ow + x] = inside(p, src_size.0, src_size.1);
                    sources.push(p);
                }
                Err(_) => sources.push([f64::NAN, f64::NAN]),
            }
        }
    }
    (sources, mask)
}

/// Resample a `[1, c, h, w]` map at the given sources; invalid pixels are 0.
pub(crate) fn resample_plain<T: Scalar>(map: &Tensor<T>, sources: &[[f64; 2]], mask: &Mask) -> Tensor<T> {
    let (n, c, h, w) = map.dims4();
    assert_eq!(n, 1, "warp expects a single image");
    let mut out = Tensor::zeros(&[1, c, mask.h, mask.w]);
    for (i, src) in sources.iter().enumerate() {
        if !mask.data[i] {
            continue;
        }
        let taps = bilinear_taps::<T>(src[0], src[1], h, w);
        for ch in 0..c {
            out.plane_mut(0, ch)[i] = taps.sample(map.plane(0, ch));
        }
    }
    out
}

/// Inverse-warp a `[1, c, h, w]` image by `H` onto an `out_size` grid with
/// bilinear sampling: `out[p] = image(H⁻¹·p)`. The mask marks pixels whose
/// source lies inside the input; other pixels are 0.
pub fn warp_image<T: Scalar>(image: &Tensor<T>, h: &Homography, out_size: (usize, usize)) -> (Tensor<T>, Mask) {
    let (_, _, ih, iw) = image.dims4();
    let (sources, mask) = warp_sources(h, (ih, iw), out_size);
    (resample_plain(image, &sources, &mask), mask)
}

/// [`warp_image`] onto a grid of the input's own size, channel-wise.
pub fn warp_map<T: Scalar>(map: &Tensor<T>, h: &Homography) -> (Tensor<T>, Mask) {
    let (_, _, mh, mw) = map.dims4();
    warp_image(map, h, (mh, mw))
}

/// [`warp_map`] for descriptor maps: valid pixels are re-normalized to unit
/// length.
pub fn warp_descriptors<T: Scalar>(map: &Tensor<T>, h: &Homography) -> (Tensor<T>, Mask) {
    let (mut out, mask) = warp_map(map, h);
    let (_, c, _, _) = out.dims4();
    let hw = mask.h * mask.w;
    let eps = T::lit(crate::nn::NORMALIZE_EPS);
    for p in 0..hw {
        if !mask.data[p] {
            continue;
        }
        let norm = (0..c).map(|ch| out.data()[ch * hw + p].powi(2)).sum::<T>().sqrt().max(eps);
        for ch in 0..c {
            out.data_mut()[ch * hw + p] /= norm;
        }
    }
    (out, mask)
}

/// Ground-truth pixel correspondences between two images related by `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceBatch {
    /// Integer pixel coordinates `(x, y)` in image A.
    pub coords_a: Vec<[usize; 2]>,
    /// `H · coords_a`, real-valued, in image B.
    pub coords_b: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl CorrespondenceBatch {
    pub fn len(&self) -> usize {
        self.coords_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords_a.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Only the valid pairs, in order.
    pub fn compacted(&self) -> CorrespondenceBatch {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.valid[i]).collect();
        CorrespondenceBatch {
            coords_a: keep.iter().map(|&i| self.coords_a[i]).collect(),
            coords_b: keep.iter().map(|&i| self.coords_b[i]).collect(),
            valid: vec![true; keep.len()],
        }
    }

    pub fn points_a(&self) -> Vec<[f64; 2]> {
        self.coords_a.iter().map(|c| [c[0] as f64, c[1] as f64]).collect()
    }
}

/// Draw `n` distinct pixels from the interior of A (at least `margin` from
/// every border), project them by `H`, and keep those strictly inside B.
/// Fails when fewer than `min(n, max(32, n/4))` survive.
pub fn build_correspondences<R: Rng + ?Sized>(
    h: &Homography,
    size_a: (usize, usize),
    size_b: (usize, usize),
    n: usize,
    margin: usize,
    rng: &mut R,
) -> Result<CorrespondenceBatch> {
    if n == 0 {
        return Err(Error::Config("correspondence count must be at least 1".into()));
    }
    let (ha, wa) = size_a;
    let (hb, wb) = size_b;
    let required = n.min(32.max(n / 4));
    if ha <= 2 * margin || wa <= 2 * margin {
        return Err(Error::InsufficientOverlap { valid: 0, required });
    }
    let (ih, iw) = (ha - 2 * margin, wa - 2 * margin);
    let picks = sample_indices(rng, ih * iw, n.min(ih * iw));
    let mut batch = CorrespondenceBatch {
        coords_a: Vec::with_capacity(n),
        coords_b: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for idx in picks.iter() {
        let a = [idx % iw + margin, idx / iw + margin];
        let (b, ok) = match h.project([a[0] as f64, a[1] as f64]) {
            Ok(b) => {
                let ok = b[0] > 0.0 && b[1] > 0.0 && b[0] < wb as f64 - 1.0 && b[1] < hb as f64 - 1.0;
                (b, ok)
            }
            Err(_) => ([f64::NAN, f64::NAN], false),
        };
        batch.coords_a.push(a);
        batch.coords_b.push(b);
        batch.valid.push(ok);
    }
    let valid = batch.n_valid();
    if valid < required {
        return Err(Error::InsufficientOverlap { valid, required });
    }
    Ok(batch)
}

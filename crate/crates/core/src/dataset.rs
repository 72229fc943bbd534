//! Image-pair datasets: manifest files on disk and the procedural
//! `synth://` source.
//!
//! A manifest is a TOML file with one `[[pair]]` table per image pair.
//! Paths are relative to the manifest's directory.
//!
//! ```toml
//! [[pair]]
//! id = "scene-001"
//! image_a = "vis/001.png"
//! modality_a = "vis"
//! image_b = "ir/001.png"
//! modality_b = "ir"
//! # Optional. 3x3 homography text file mapping A pixels onto B pixels.
//! homography = "gt/001.txt"
//! # Optional. One landmark per line: x_a y_a x_b y_b
//! landmarks = "gt/001.landmarks"
//! ```
//!
//! A pair with neither file is taken as pixel-aligned. With landmarks only,
//! the homography is a least-squares fit to them.
//!
//! `synth://<recipe>[?count=N&size=S&seed=K&offset=O]` generates `count`
//! grayscale scenes of `size x size` pixels (defaults 20, 256, 0, 0). Scene
//! `i` depends only on `seed` and `offset + i`. Image A is the scene's
//! luminance (modality `vis`), image B the recipe applied to it (modality
//! `ir`); the pair is pixel-aligned.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::image_io::{gaussian_blur, load_image, luminance};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub image_a: PathBuf,
    pub modality_a: String,
    pub image_b: PathBuf,
    pub modality_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, rename = "pair")]
    pub pairs: Vec<PairEntry>,
}

pub const MANIFEST_HINT: &str = "expected a TOML manifest with [[pair]] tables holding id, image_a, modality_a, image_b, modality_b and optional homography / landmarks paths";

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::format("manifest", format!("{e}; {MANIFEST_HINT}")))?;
        let mut ids = std::collections::BTreeSet::new();
        for p in &m.pairs {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::format("manifest", format!("duplicate pair id `{}`", p.id)));
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format("manifest", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Landmark correspondences `(x_a, y_a, x_b, y_b)`.
pub fn parse_landmarks(text: &str) -> Result<Vec<[f64; 4]>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("landmarks", format!("line {}: {e}", ln + 1)))?;
        if v.len() != 4 {
            return Err(Error::format("landmarks", format!("line {}: expected 4 numbers", ln + 1)));
        }
        out.push([v[0], v[1], v[2], v[3]]);
    }
    if out.len() < 4 {
        return Err(Error::format("landmarks", format!("{} landmarks, at least 4 required", out.len())));
    }
    Ok(out)
}

pub fn format_landmarks(lm: &[[f64; 4]]) -> String {
    lm.iter().map(|l| format!("{:?} {:?} {:?} {:?}\n", l[0], l[1], l[2], l[3])).collect()
}

/// A loaded pair. `homography` maps A pixels onto B pixels; `None` means
/// the images are pixel-aligned.
#[derive(Clone, Debug)]
pub struct PairData {
    pub id: String,
    pub image_a: Tensor<f32>,
    pub modality_a: String,
    pub image_b: Tensor<f32>,
    pub modality_b: String,
    pub homography: Option<Homography>,
    pub landmarks: Option<Vec<[f64; 4]>>,
}

/// One dataset slot; unreadable pairs keep their id and the reason.
#[derive(Clone, Debug)]
pub struct PairSlot {
    pub id: String,
    pub data: std::result::Result<PairData, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    IdentityGray,
    InvertedBlur,
    GammaEdge,
}

impl Recipe {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity-gray" => Ok(Recipe::IdentityGray),
            "inverted-blur" => Ok(Recipe::InvertedBlur),
            "gamma-edge" => Ok(Recipe::GammaEdge),
            other => Err(Error::UnknownRecipe(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Recipe::IdentityGray => "identity-gray",
            Recipe::InvertedBlur => "inverted-blur",
            Recipe::GammaEdge => "gamma-edge",
        }
    }
}

pub const INVERTED_BLUR_SIGMA: f32 = 1.5;
pub const GAMMA_EDGE_GAMMA: f32 = 0.4;

/// A pseudo-modality of `image` (`[1, c, h, w]`, values in `[0, 1]`),
/// returned as one channel:
///
/// * `identity-gray`: luminance;
/// * `inverted-blur`: `1 - luminance`, Gaussian blur with σ = 1.5;
/// * `gamma-edge`: `0.5 lum^0.4 + 0.5 |∇lum| / max |∇lum|` (central
///   differences, replicate borders).
pub fn synth_modality(image: &Tensor<f32>, recipe: Recipe) -> Tensor<f32> {
    let lum = luminance(image);
    match recipe {
        Recipe::IdentityGray => lum,
        Recipe::InvertedBlur => gaussian_blur(&lum.map(|v| 1.0 - v), INVERTED_BLUR_SIGMA),
        Recipe::GammaEdge => {
            let (_, _, h, w) = lum.dims4();
            let p = lum.plane(0, 0);
            let at = |y: isize, x: isize| p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
            let mut grad = vec![0.0f32; h * w];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
                    let gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
                    grad[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
                }
            }
            let max = grad.iter().copied().fold(0.0f32, f32::max);
            let inv = if max > 0.0 { 1.0 / max } else { 0.0 };
            Tensor::from_fn(&[1, 1, h, w], |i| 0.5 * p[i].max(0.0).powf(GAMMA_EDGE_GAMMA) + 0.5 * grad[i] * inv)
        }
    }
}

/// Parameters of a `synth://` URI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub recipe: Recipe,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub offset: usize,
}

impl SynthSpec {
    pub fn new(recipe: Recipe) -> Self {
        Self {
            recipe,
            count: 20,
            size: 256,
            seed: 0,
            offset: 0,
        }
    }

    pub fn uri(&self) -> String {
        format!("synth://{}?count={}&size={}&seed={}&offset={}", self.recipe.name(), self.count, self.size, self.seed, self.offset)
    }
}

/// Where pairs come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synth(SynthSpec),
}

impl DatasetSource {
    pub fn parse(uri: &str) -> Result<Self> {
        let Some(rest) = uri.strip_prefix("synth://") else {
            return Ok(DatasetSource::Manifest(PathBuf::from(uri)));
        };
        let (name, query) = rest.split_once('?').unwrap_or((rest, ""));
        let mut spec = SynthSpec::new(Recipe::parse(name)?);
        for kv in query.split('&').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("bad synth parameter `{kv}`")))?;
            let num = || v.parse::<u64>().map_err(|e| Error::Config(format!("synth parameter `{k}`: {e}")));
            match k {
                "count" => spec.count = num()? as usize,
                "size" => spec.size = num()? as usize,
                "seed" => spec.seed = num()?,
                "offset" => spec.offset = num()? as usize,
                _ => return Err(Error::Config(format!("unknown synth parameter `{k}`"))),
            }
        }
        if spec.count == 0 || spec.size < 32 {
            return Err(Error::Config("synth datasets need count >= 1 and size >= 32".into()));
        }
        Ok(DatasetSource::Synth(spec))
    }

    /// Load every pair. A missing or malformed manifest is an error;
    /// unreadable pairs become failed slots.
    pub fn load(&self) -> Result<Vec<PairSlot>> {
        match self {
            DatasetSource::Synth(spec) => Ok((0..spec.count).map(|i| synth_pair(spec, i)).map(|p| PairSlot { id: p.id.clone(), data: Ok(p) }).collect()),
            DatasetSource::Manifest(path) => {
                let manifest = Manifest::read(path)?;
                let base = path.parent().unwrap_or(Path::new("."));
                Ok(manifest
                    .pairs
                    .iter()
                    .map(|e| PairSlot {
                        id: e.id.clone(),
                        data: load_entry(e, base).map_err(|err| err.to_string()),
                    })
                    .collect())
            }
        }
    }
}

fn load_entry(e: &PairEntry, base: &Path) -> Result<PairData> {
    let image_a = load_image(&base.join(&e.image_a))?;
    let image_b = load_image(&base.join(&e.image_b))?;
    let homography = e.homography.as_ref().map(|p| Homography::read(&base.join(p))).transpose()?;
    let landmarks = match &e.landmarks {
        Some(p) => {
            let path = base.join(p);
            let text = std::fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
            Some(parse_landmarks(&text)?)
        }
        None => None,
    };
    Ok(PairData {
        id: e.id.clone(),
        image_a,
        modality_a: e.modality_a.clone(),
        image_b,
        modality_b: e.modality_b.clone(),
        homography,
        landmarks,
    })
}

/// Pair `index` of a synthetic dataset.
pub fn synth_pair(spec: &SynthSpec, index: usize) -> PairData {
    let scene = synth_scene(spec.seed, (spec.offset + index) as u64, spec.size);
    PairData {
        id: format!("synth-{}-{:04}", spec.recipe.name(), spec.offset + index),
        image_b: synth_modality(&scene, spec.recipe),
        image_a: scene,
        modality_a: "vis".into(),
        modality_b: "ir".into(),
        homography: None,
        landmarks: None,
    }
}

/// A procedurally drawn grayscale scene: smooth multi-scale shading under
/// overlapping shapes, gratings and strokes. Values in `[0, 1]`.
pub fn synth_scene(seed: u64, index: u64, size: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = size;
    let s = n as f32;
    let mut img = value_noise(n, &mut rng);

    let shapes = rng.random_range(14..24);
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let r = rng.random_range(0.04..0.18) * s;
        let aspect = rng.random_range(0.4..1.0f32);
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        let (ca, sa) = (angle.cos(), angle.sin());
        let kind = rng.random_range(0..3);
        let level = rng.random_range(0.0..1.0f32);
        let alpha = rng.random_range(0.6..1.0f32);
        let grating = rng.random_bool(0.3).then(|| (rng.random_range(0.15..0.6f32), rng.random_range(0.0..std::f32::consts::PI)));
        let x0 = ((cx - r) as isize).max(0) as usize;
        let x1 = ((cx + r) as usize + 1).min(n);
        let y0 = ((cy - r) as isize).max(0) as usize;
        let y1 = ((cy + r) as usize + 1).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let u = (ca * dx + sa * dy) / r;
                let v = (-sa * dx + ca * dy) / (r * aspect);
                let inside = match kind {
                    0 => u * u + v * v <= 1.0,
                    1 => u.abs() <= 1.0 && v.abs() <= 1.0,
                    _ => v >= -0.8 && v <= 1.0 - 2.0 * u.abs(),
                };
                if !inside {
                    continue;
                }
                let val = match grating {
                    Some((freq, phase)) => 0.5 + 0.5 * (freq * (ca * x as f32 - sa * y as f32) + phase).sin() * level.max(0.3),
                    None => level,
                };
                let p = &mut img[y * n + x];
                *p = (1.0 - alpha) * *p + alpha * val;
            }
        }
    }

    let strokes = rng.random_range(3..8);
    for _ in 0..strokes {
        let (x0, y0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (x1, y1) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let width = rng.random_range(0.7..2.0f32);
        let level = rng.random_range(0.0..1.0f32);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        for y in 0..n {
            for x in 0..n {
                let t = (((x as f32 - x0) * dx + (y as f32 - y0) * dy) / len2).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * dx - x as f32, y0 + t * dy - y as f32);
                if px * px + py * py <= width * width {
                    img[y * n + x] = level;
                }
            }
        }
    }

    let t = Tensor::from_vec(&[1, 1, n, n], img);
    gaussian_blur(&t, 0.7).map(|v| v.clamp(0.0, 1.0))
}

/// Sum of bilinearly upsampled random grids at several scales, rescaled to
/// `[0.1, 0.9]`.
fn value_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; n * n];
    let mut amp = 1.0f32;
    for cells in [3usize, 6, 12, 24] {
        let g: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = cells as f32 / n as f32;
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f32 * scale, y as f32 * scale);
                let (ix, iy) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
                let (tx, ty) = (fx - ix as f32, fy - iy as f32);
                let at = |a: usize, b: usize| g[b * (cells + 1) + a];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                out[y * n + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp *= 0.5;
    }
    let (lo, hi) = out.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-6);
    out.iter().map(|v| 0.1 + 0.8 * (v - lo) / span).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_uri_parsing() {
        let DatasetSource::Synth(s) = DatasetSource::parse("synth://inverted-blur?count=5&size=64&offset=20").unwrap() else {
            panic!()
        };
        assert_eq!((s.recipe, s.count, s.size, s.offset, s.seed), (Recipe::InvertedBlur, 5, 64, 20, 0));
        assert_eq!(DatasetSource::parse(&s.uri()).unwrap(), DatasetSource::Synth(s));
        assert!(matches!(DatasetSource::parse("synth://sepia"), Err(Error::UnknownRecipe(_))));
        assert!(DatasetSource::parse("synth://gamma-edge?bogus=1").is_err());
        assert_eq!(DatasetSource::parse("data/m.toml").unwrap(), DatasetSource::Manifest("data/m.toml".into()));
    }

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        let a = synth_scene(3, 1, 48);
        assert_eq!(a, synth_scene(3, 1, 48));
        assert_ne!(a, synth_scene(3, 2, 48));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_gray_keeps_gray_images() {
        let g = synth_scene(0, 0, 40);
        assert_eq!(synth_modality(&g, Recipe::IdentityGray), g);
    }

    #[test]
    fn manifest_round_trip() {
        let text = r#"
[[pair]]
id = "p1"
image_a = "a.png"
modality_a = "vis"
image_b = "b.png"
modality_b = "ir"
landmarks = "p1.lm"
"#;
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].landmarks.as_deref(), Some(Path::new("p1.lm")));
        let back = Manifest::parse(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(Manifest::parse("[[pair]]\nid = 1").is_err());
        assert!(Manifest::parse(&format!("{text}\n{text}")).is_err());
    }

    #[test]
    fn landmark_parsing() {
        let lm = parse_landmarks("# x_a y_a x_b y_b\n1 2 3 4\n5 6 7 8\n9 10 11 12\n0 0 1 1\n").unwrap();
        assert_eq!(lm.len(), 4);
        assert_eq!(lm[1], [5.0, 6.0, 7.0, 8.0]);
        assert!(parse_landmarks("1 2 3\n").is_err());
        assert!(parse_landmarks("1 2 3 4\n").is_err());
        assert_eq!(parse_landmarks(&format_landmarks(&lm)).unwrap(), lm);
    }
}

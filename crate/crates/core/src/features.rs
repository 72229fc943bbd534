//! Discrete features from dense maps: keypoint selection, mutual
//! nearest-neighbour matching, and the on-disk feature file.
//!
//! Feature file layout (all numbers little-endian):
//!
//! ```text
//! MMFEAT-FEATURES 1\n
//! count <K>\n
//! image_size <h> <w>\n
//! descriptor_dim <C>\n
//! model <hash or ->\n
//! end\n
//! x[K] f32, y[K] f32, score[K] f32, desc[K*C] f32 (row-major)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::DenseFeatures;
use crate::tensor::Scalar;

pub const DEFAULT_NMS_RADIUS: f64 = 4.0;
pub const DEFAULT_BORDER: usize = 8;
const FILE_MAGIC: &str = "MMFEAT-FEATURES 1";

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    /// `(x, y)` pixel coordinates.
    pub coords: Vec<[f64; 2]>,
    /// Descending.
    pub scores: Vec<f32>,
    /// `K x dim`, row-major, unit rows.
    pub descriptors: Vec<f32>,
    pub dim: usize,
    /// `(h, w)`
    pub image_size: (usize, usize),
    /// Fewer than the requested number of keypoints survived selection.
    pub shortfall: bool,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    /// The first `k` keypoints (the `k` best scored).
    pub fn truncated(&self, k: usize) -> KeypointSet {
        let shortfall = self.shortfall || self.len() < k;
        let k = k.min(self.len());
        KeypointSet {
            coords: self.coords[..k].to_vec(),
            scores: self.scores[..k].to_vec(),
            descriptors: self.descriptors[..k * self.dim].to_vec(),
            dim: self.dim,
            image_size: self.image_size,
            shortfall,
        }
    }

    pub fn save(&self, path: &Path, model_hash: Option<&str>) -> Result<()> {
        let (h, w) = self.image_size;
        let mut buf = format!(
            "{FILE_MAGIC}\ncount {}\nimage_size {h} {w}\ndescriptor_dim {}\nmodel {}\nend\n",
            self.len(),
            self.dim,
            model_hash.unwrap_or("-")
        )
        .into_bytes();
        let cols = [
            self.coords.iter().map(|c| c[0] as f32).collect::<Vec<_>>(),
            self.coords.iter().map(|c| c[1] as f32).collect(),
            self.scores.clone(),
        ];
        for v in cols.iter().flatten().chain(&self.descriptors) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Read a feature file; also returns the model hash from the header.
    pub fn load(path: &Path) -> Result<(KeypointSet, Option<String>)> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |d: String| Error::format("feature file", d);
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let end = buf[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
            let s = std::str::from_utf8(&buf[pos..pos + end]).map_err(|e| bad(e.to_string()))?.to_string();
            pos += end + 1;
            Ok(s)
        };
        if line()? != FILE_MAGIC {
            return Err(bad("missing magic line".into()));
        }
        let mut field = |name: &str, n: usize| -> Result<Vec<String>> {
            let l = line()?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(format!("expected `{name}`, got `{l}`")));
            }
            let vals: Vec<String> = parts.map(str::to_string).collect();
            if vals.len() != n {
                return Err(bad(format!("`{name}` takes {n} value(s)")));
            }
            Ok(vals)
        };
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s}: {e}")));
        let k = num(&field("count", 1)?[0])?;
        let size = field("image_size", 2)?;
        let (h, w) = (num(&size[0])?, num(&size[1])?);
        let dim = num(&field("descriptor_dim", 1)?[0])?;
        let model = field("model", 1)?.remove(0);
        field("end", 0)?;
        let body = &buf[pos..];
        let want = 4 * k * (3 + dim);
        if body.len() != want {
            return Err(bad(format!("payload is {} bytes, expected {want}", body.len())));
        }
        let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let (xs, rest) = floats.split_at(k);
        let (ys, rest) = rest.split_at(k);
        let (scores, desc) = rest.split_at(k);
        let set = KeypointSet {
            coords: xs.iter().zip(ys).map(|(&x, &y)| [x as f64, y as f64]).collect(),
            scores: scores.to_vec(),
            descriptors: desc.to_vec(),
            dim,
            image_size: (h, w),
            shortfall: false,
        };
        Ok((set, (model != "-").then_some(model)))
    }
}

/// Strict 3x3 local maxima of an `h x w` map. Within a plateau of equal
/// values only the first pixel in raster order survives. Returned in raster
/// order as `(y, x)`.
pub fn local_maxima<T: Scalar>(scores: &[T], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = scores[p];
            let mut keep = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if (dy == 0 && dx == 0) || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    // Earlier neighbours must be strictly lower, later ones
                    // lower or equal.
                    if scores[q] > s || (scores[q] == s && q < p) {
                        keep = false;
                        break 'nb;
                    }
                }
            }
            if keep {
                out.push((y, x));
            }
        }
    }
    out
}

/// Keypoint selection: strict local maxima of the score map at least
/// `border` pixels from every edge, taken greedily by descending score (ties
/// by raster order) while staying farther than `nms_radius` from every kept
/// point, up to `k` of them.
pub fn select_keypoints(features: &DenseFeatures, k: usize, nms_radius: f64, border: usize) -> KeypointSet {
    assert!(k >= 1, "k must be at least 1");
    let (h, w) = features.size();
    let scores = features.scores.plane(0, 0);
    let picked = select_coords(scores, h, w, k, nms_radius, border);
    let (_, dim, _, _) = features.descriptors.dims4();
    let mut descriptors = Vec::with_capacity(picked.len() * dim);
    for &(y, x) in &picked {
        descriptors.extend(features.descriptor_at(x, y));
    }
    KeypointSet {
        coords: picked.iter().map(|&(y, x)| [x as f64, y as f64]).collect(),
        scores: picked.iter().map(|&(y, x)| scores[y * w + x]).collect(),
        descriptors,
        dim,
        image_size: (h, w),
        shortfall: picked.len() < k,
    }
}

/// The `(y, x)` coordinates chosen by [`select_keypoints`].
pub fn select_coords<T: Scalar>(scores: &[T], h: usize, w: usize, k: usize, nms_radius: f64, border: usize) -> Vec<(usize, usize)> {
    let mut cands: Vec<(usize, usize)> = local_maxima(scores, h, w)
        .into_iter()
        .filter(|&(y, x)| y >= border && x >= border && y + border < h && x + border < w)
        .collect();
    // Stable sort keeps raster order among equal scores.
    cands.sort_by(|a, b| scores[b.0 * w + b.1].partial_cmp(&scores[a.0 * w + a.1]).unwrap_or(std::cmp::Ordering::Equal));
    // Kept points are bucketed on a grid of cell size `nms_radius`, so only
    // the 3x3 neighbouring cells need checking.
    let cell = nms_radius.max(1.0);
    let (gw, gh) = ((w as f64 / cell).ceil() as usize + 1, (h as f64 / cell).ceil() as usize + 1);
    let mut grid: Vec<Vec<(usize, usize)>> = vec![Vec::new(); gw * gh];
    let r2 = nms_radius * nms_radius;
    let mut kept = Vec::with_capacity(k);
    for (y, x) in cands {
        if kept.len() == k {
            break;
        }
        let (cx, cy) = ((x as f64 / cell) as usize, (y as f64 / cell) as usize);
        let mut clear = true;
        'cells: for gy in cy.saturating_sub(1)..(cy + 2).min(gh) {
            for gx in cx.saturating_sub(1)..(cx + 2).min(gw) {
                for &(ky, kx) in &grid[gy * gw + gx] {
                    let d2 = (ky as f64 - y as f64).powi(2) + (kx as f64 - x as f64).powi(2);
                    if d2 <= r2 {
                        clear = false;
                        break 'cells;
                    }
                }
            }
        }
        if clear {
            grid[cy * gw + cx].push((y, x));
            kept.push((y, x));
        }
    }
    kept
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    /// `(index into a, index into b)`, ordered by the `a` index.
    pub pairs: Vec<[usize; 2]>,
    /// Angular distance of each pair, radians.
    pub distances: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Clamped cosine similarities between every row of `a` and `b`.
fn similarity(a: &KeypointSet, b: &KeypointSet) -> Vec<f64> {
    let (na, nb, c) = (a.len(), b.len(), a.dim);
    let da: Vec<f64> = a.descriptors.iter().map(|&v| v as f64).collect();
    let db: Vec<f64> = b.descriptors.iter().map(|&v| v as f64).collect();
    let mut sim = vec![0.0; na * nb];
    f64::gemm(na, c, nb, 1.0, &da, c as isize, 1, &db, 1, c as isize, 0.0, &mut sim, nb as isize, 1);
    let lim = 1.0 - crate::losses::ACOS_EPS;
    sim.iter_mut().for_each(|v| *v = v.clamp(-lim, lim));
    sim
}

/// Mutual nearest neighbours under angular distance; ties go to the
/// smaller index.
pub fn match_bidirectional(a: &KeypointSet, b: &KeypointSet) -> MatchSet {
    assert_eq!(a.dim, b.dim, "descriptor dimensions differ");
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        return MatchSet::default();
    }
    let sim = similarity(a, b);
    let mut best_b = vec![0usize; na];
    for (i, best) in best_b.iter_mut().enumerate() {
        let row = &sim[i * nb..(i + 1) * nb];
        for j in 1..nb {
            if row[j] > row[*best] {
                *best = j;
            }
        }
    }
    let mut best_a = vec![0usize; nb];
    for (j, best) in best_a.iter_mut().enumerate() {
        for i in 1..na {
            if sim[i * nb + j] > sim[*best * nb + j] {
                *best = i;
            }
        }
    }
    let mut out = MatchSet::default();
    for (i, &j) in best_b.iter().enumerate() {
        if best_a[j] == i {
            out.pairs.push([i, j]);
            out.distances.push(sim[i * nb + j].acos());
        }
    }
    out
}

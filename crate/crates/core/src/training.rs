//! Training: crop-and-warp pair sampling, the Adam schedule and the loop
//! with NDJSON logging, checkpoints and resume.
//!
//! Configuration is TOML. Top-level keys are the training settings; the
//! `[loss]`, `[transform]` and `[model]` tables hold [`LossConfig`],
//! [`TransformConfig`] and [`ModelConfig`]. Every key has a default:
//!
//! ```toml
//! dataset = "synth://inverted-blur"
//! seed = 0
//! crop_size = 192
//! batch_size = 2
//! iterations = 10000
//! lr_init = 0.001
//! weight_decay = 0.0005
//! n_samples = 512
//! checkpoint_every = 1000
//! clip_grad_norm = 0.0        # 0 disables clipping
//! objective = "recoupled"     # or "naive-coupled"
//! correspondence_margin = 8
//!
//! [loss]
//! lambda = 8.0
//! ```
//!
//! Step `s` draws its samples from a generator seeded by `(seed, s)`, so a
//! run resumed from a checkpoint replays exactly the steps an uninterrupted
//! run would have taken.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::dataset::{DatasetSource, PairData};
use crate::error::{Error, Result};
use crate::geometry::{build_correspondences, sample_homography, warp_image, CorrespondenceBatch, Homography, Mask, TransformConfig};
use crate::image_io::{crop, resize_bilinear, save_gray_png, standardize, to_channels};
use crate::losses::{total_loss, ImageFeatures, LossBreakdown, LossConfig, Objective, PairInputs};
use crate::model::Checkpoint;
use crate::model::{Model, ModelConfig, Mode};
use crate::tensor::Tensor;

pub use crate::dataset::{synth_modality, Recipe};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Attempts at drawing a sample with enough valid correspondences.
const SAMPLE_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Manifest path or `synth://` URI.
    pub dataset: String,
    pub seed: u64,
    pub crop_size: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    /// Correspondences drawn per pair.
    pub n_samples: usize,
    pub checkpoint_every: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_grad_norm: f64,
    pub objective: Objective,
    /// Correspondences start at least this far from the crop border.
    pub correspondence_margin: usize,
    pub loss: LossConfig,
    pub transform: TransformConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: "synth://inverted-blur".into(),
            seed: 0,
            crop_size: 192,
            batch_size: 2,
            iterations: 10_000,
            lr_init: 1e-3,
            weight_decay: 5e-4,
            n_samples: 512,
            checkpoint_every: 1000,
            clip_grad_norm: 0.0,
            objective: Objective::Recoupled,
            correspondence_margin: 8,
            loss: LossConfig::default(),
            transform: TransformConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lambda(&self) -> f64 {
        self.loss.lambda
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 64 {
            return Err(Error::Config(format!("crop_size must be at least 64, got {}", self.crop_size)));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.n_samples == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, iterations, n_samples and checkpoint_every must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_grad_norm >= 0.0) {
            return Err(Error::Config("lr_init must be positive; weight_decay and clip_grad_norm non-negative".into()));
        }
        if 2 * self.correspondence_margin >= self.crop_size {
            return Err(Error::Config("correspondence_margin leaves no room inside the crop".into()));
        }
        self.loss.validate()?;
        self.transform.validate()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Set dotted keys (`loss.lambda=4`); see [`apply_overrides`].
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        apply_overrides(self, overrides)
    }
}

/// Copy of `value` with dotted keys (`loss.lambda=4`) set to TOML-parsed
/// values, or to strings when the value is not valid TOML. Keys must
/// already exist in the serialized form.
pub fn apply_overrides<'a, T: Serialize + serde::de::DeserializeOwned>(value: &T, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<T> {
    let mut table = toml::Table::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    for (key, raw) in overrides {
        set_dotted(&mut table, key, parse_value(raw))?;
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown configuration key `{key}`"));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().ok_or_else(unknown)?;
    let mut cur = table;
    for p in parts {
        cur = cur.get_mut(p).and_then(|v| v.as_table_mut()).ok_or_else(unknown)?;
    }
    let slot = cur.get_mut(last).ok_or_else(unknown)?;
    // Integers given for float keys stay floats.
    *slot = match (&*slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

/// `lr_init · (1 − iter / iterations)`, floored at 0.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    (cfg.lr_init * (1.0 - iter as f64 / cfg.iterations as f64)).max(0.0)
}

/// One training pair: crop A, warped crop B and the crop-local homography
/// from A to B.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub pair_id: String,
    /// Standardized `[1, c, s, s]` crops.
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub modality_a: String,
    pub modality_b: String,
    pub homography: Homography,
    /// Pixels of B that received image content.
    pub mask_b: Mask,
    /// The source images were upscaled to fit the crop.
    pub resized: bool,
}

/// Random aligned crop of both images; B is additionally warped by a fresh
/// random homography, sampled from the full image so that content exists
/// beyond the crop border where possible.
pub fn make_sample<R: Rng + ?Sized>(pair: &PairData, cfg: &TrainConfig, rng: &mut R) -> Result<TrainSample> {
    let c = cfg.crop_size;
    let (_, _, ha, wa) = pair.image_a.dims4();
    let (_, _, hb, wb) = pair.image_b.dims4();
    let pair_h = pair.homography.unwrap_or_else(Homography::identity);
    if pair.homography.is_none() && (ha, wa) != (hb, wb) {
        return Err(Error::Config(format!("pair `{}`: aligned images differ in size", pair.id)));
    }
    let channels = |m: &str| cfg.model.modality(m).map(|m| m.channels);
    let mut img_a = to_channels(&pair.image_a, channels(&pair.modality_a)?)?;
    let mut img_b = to_channels(&pair.image_b, channels(&pair.modality_b)?)?;
    let mut pair_h = pair_h;
    let mut resized = false;
    if ha.min(wa) < c {
        // Scale A up; B follows by the same factor so H keeps its meaning.
        let k = c as f64 / ha.min(wa) as f64;
        let size = |h: usize, w: usize| (((h as f64 * k).ceil() as usize).max(c), ((w as f64 * k).ceil() as usize).max(c));
        let (nha, nwa) = size(ha, wa);
        let (nhb, nwb) = size(hb, wb);
        img_a = resize_bilinear(&img_a, nha, nwa);
        img_b = resize_bilinear(&img_b, nhb, nwb);
        let sa = Homography::scaling(nwa as f64 / wa as f64, nha as f64 / ha as f64);
        let sb = Homography::scaling(nwb as f64 / wb as f64, nhb as f64 / hb as f64);
        pair_h = sb.compose(&pair_h)?.compose(&sa.inverse())?;
        resized = true;
    }
    let (_, _, ha, wa) = img_a.dims4();
    let x0 = rng.random_range(0..=wa - c);
    let y0 = rng.random_range(0..=ha - c);
    let crop_a = crop(&img_a, x0, y0, c, c);
    let w = sample_homography(&cfg.transform, (c, c), rng)?;
    // B crop pixel r shows full-B point H_pair (o + W⁻¹ r).
    let g = w.compose(&Homography::translation(-(x0 as f64), -(y0 as f64)))?.compose(&pair_h.inverse())?;
    let (crop_b, mask_b) = warp_image(&img_b, &g, (c, c));
    Ok(TrainSample {
        pair_id: pair.id.clone(),
        image_a: standardize(&crop_a),
        image_b: standardize(&crop_b),
        modality_a: pair.modality_a.clone(),
        modality_b: pair.modality_b.clone(),
        homography: w,
        mask_b,
        resized,
    })
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// `p ← p − lr (m̂ / (√v̂ + ε) + wd p)`.
    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor<f32>>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i] as f64);
                let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let pi = p.data()[i] as f64;
                let step = (mi / c1) / ((vi / c2).sqrt() + self.eps) + self.weight_decay * pi;
                p.data_mut()[i] = (pi - lr * step) as f32;
            }
        }
    }
}

/// One logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub desc_r: f64,
    pub peak_r_a: f64,
    pub peak_r_b: f64,
    pub rep_r: f64,
    /// Mean detection score over every image of the batch.
    pub mean_score: f64,
    pub anchors: usize,
    pub grad_norm: f64,
    pub resized: usize,
}

impl StepRecord {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.grad_norm.is_finite()
    }
}

/// Loss, gradients and bookkeeping of one step before the update.
#[derive(Debug)]
pub struct StepEval {
    pub record: StepRecord,
    pub grads: BTreeMap<String, Tensor<f32>>,
    pub bn_stats: Vec<(String, crate::nn::BatchStats<f64>)>,
    pub breakdowns: Vec<LossBreakdown>,
    pub samples: Vec<(TrainSample, CorrespondenceBatch)>,
}

/// Model, optimizer and step counter over a fixed set of pairs.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub optim: Adam,
    /// Completed steps.
    pub step: usize,
    pub pairs: Vec<PairData>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64 + 1);
    r
}

impl Trainer {
    pub fn new(cfg: TrainConfig, pairs: Vec<PairData>) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("training needs at least one readable pair".into()));
        }
        for p in &pairs {
            cfg.model.modality(&p.modality_a)?;
            cfg.model.modality(&p.modality_b)?;
        }
        Ok(Self {
            model: Model::new(cfg.model.clone())?,
            optim: Adam::new(cfg.weight_decay),
            step: 0,
            cfg,
            pairs,
        })
    }

    /// Restore model, optimizer and step counter. The checkpoint's training
    /// configuration must hash to `cfg`'s, except for `iterations`, which
    /// may be extended.
    pub fn resume(cfg: TrainConfig, pairs: Vec<PairData>, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, pairs)?;
        let stored: TrainConfig = serde_json::from_value(ck.meta.get("train").cloned().ok_or_else(|| Error::format("checkpoint", "no training configuration"))?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let comparable = TrainConfig {
            iterations: t.cfg.iterations,
            ..stored
        };
        if comparable.hash() != t.cfg.hash() {
            return Err(Error::Config("checkpoint was produced with a different training configuration".into()));
        }
        t.model = Model::from_checkpoint(ck)?;
        let step = ck.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| Error::format("checkpoint", "no step counter"))?;
        t.step = step as usize;
        t.optim.t = ck.meta.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(step);
        for name in t.model.params.params.keys() {
            for (prefix, slot) in [("optim/m/", &mut t.optim.m), ("optim/v/", &mut t.optim.v)] {
                let e = ck.entries.get(&format!("{prefix}{name}")).ok_or_else(|| Error::format("checkpoint", format!("missing optimizer state for `{name}`")))?;
                slot.insert(name.clone(), e.clone());
            }
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "step": self.step,
            "adam_t": self.optim.t,
            "train": self.cfg,
            "train_hash": self.cfg.hash(),
        });
        let mut ck = self.model.to_checkpoint(meta);
        for (prefix, map) in [("optim/m/", &self.optim.m), ("optim/v/", &self.optim.v)] {
            for (k, t) in map {
                ck.entries.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        ck
    }

    /// Samples and correspondences of step `step`.
    pub fn samples(&self, step: usize) -> Result<Vec<(TrainSample, CorrespondenceBatch)>> {
        let mut rng = step_rng(self.cfg.seed, step);
        let c = self.cfg.crop_size;
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let mut last_err = None;
            let mut got = None;
            for _ in 0..SAMPLE_ATTEMPTS {
                let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
                let s = make_sample(pair, &self.cfg, &mut rng)?;
                match build_correspondences(&s.homography, (c, c), (c, c), self.cfg.n_samples, self.cfg.correspondence_margin, &mut rng) {
                    Ok(mut batch) => {
                        // Drop correspondences landing on padding in B.
                        for (k, b) in batch.coords_b.iter().enumerate() {
                            if batch.valid[k] && !s.mask_b.get(b[0].round() as usize, b[1].round() as usize) {
                                batch.valid[k] = false;
                            }
                        }
                        if batch.n_valid() > 0 {
                            got = Some((s, batch));
                            break;
                        }
                    }
                    Err(e @ Error::InsufficientOverlap { .. }) => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            out.push(got.ok_or_else(|| last_err.unwrap_or(Error::InsufficientOverlap { valid: 0, required: 1 }))?);
        }
        Ok(out)
    }

    /// Forward and backward for `samples` without touching any state.
    pub fn evaluate(&self, step: usize, samples: Vec<(TrainSample, CorrespondenceBatch)>, objective: Objective) -> Result<StepEval> {
        let mut g = Graph::<f32>::new();
        let vars = self.model.params.register(&mut g, true);
        // One forward per modality so batch statistics stay per modality.
        let mut groups: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, (s, _)) in samples.iter().enumerate() {
            groups.entry(&s.modality_a).or_default().push((i, 0));
            groups.entry(&s.modality_b).or_default().push((i, 1));
        }
        let mut feats: BTreeMap<(usize, usize), ImageFeatures> = BTreeMap::new();
        let mut bn_stats = Vec::new();
        let mut score_sum = 0.0;
        let mut score_n = 0usize;
        for (modality, members) in &groups {
            let imgs: Vec<&Tensor<f32>> = members.iter().map(|&(i, side)| if side == 0 { &samples[i].0.image_a } else { &samples[i].0.image_b }).collect();
            let f = self.model.forward(&mut g, &vars, &Tensor::stack(&imgs), modality, Mode::Train)?;
            bn_stats.extend(f.bn_stats.iter().cloned());
            let sv = g.value(f.scores);
            score_sum += sv.data().iter().map(|&v| v as f64).sum::<f64>();
            score_n += sv.numel();
            for (k, &key) in members.iter().enumerate() {
                let descriptors = g.select_batch(f.descriptors, k);
                let scores = g.select_batch(f.scores, k);
                feats.insert(key, ImageFeatures { descriptors, scores });
            }
        }
        let mut total = None;
        let mut breakdowns = Vec::new();
        for (i, (s, batch)) in samples.iter().enumerate() {
            let fa = feats.remove(&(i, 0)).expect("A features computed");
            let fb = feats.remove(&(i, 1)).expect("B features computed");
            let compact = batch.compacted();
            let pair = PairInputs {
                image_a: &s.image_a,
                image_b: &s.image_b,
                homography: &s.homography,
                batch: &compact,
            };
            let l = total_loss(&mut g, fa, fb, &pair, &self.cfg.loss, objective)?;
            breakdowns.push(l.breakdown);
            total = Some(match total {
                None => l.total,
                Some(t) => g.add(t, l.total),
            });
        }
        let total = total.expect("batch is nonempty");
        let total = g.scale(total, 1.0 / samples.len() as f32);
        let grads_all = g.backward(total);
        let mut grads = BTreeMap::new();
        let mut sq = 0.0f64;
        for (name, p) in &self.model.params.params {
            let gr = grads_all.get_or_zeros(vars.get(name), p.shape());
            sq += gr.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            grads.insert(name.clone(), gr);
        }
        let n = breakdowns.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| breakdowns.iter().map(f).sum::<f64>() / n;
        let record = StepRecord {
            step,
            lr: lr_at(step, &self.cfg),
            total: g.value(total).item() as f64,
            desc_r: avg(|b| b.desc_r),
            peak_r_a: avg(|b| b.peak_r_a),
            peak_r_b: avg(|b| b.peak_r_b),
            rep_r: avg(|b| b.rep_r),
            mean_score: score_sum / score_n.max(1) as f64,
            anchors: breakdowns.iter().map(|b| b.anchors).sum(),
            grad_norm: sq.sqrt(),
            resized: samples.iter().filter(|(s, _)| s.resized).count(),
        };
        Ok(StepEval {
            record,
            grads,
            bn_stats,
            breakdowns,
            samples,
        })
    }

    /// Run the next step. A non-finite loss or gradient leaves the state
    /// untouched and is returned as `Err(eval)` for the caller to dump.
    pub fn step(&mut self) -> Result<std::result::Result<StepRecord, Box<StepEval>>> {
        let step = self.step;
        let samples = self.samples(step)?;
        let mut eval = self.evaluate(step, samples, self.cfg.objective)?;
        if !eval.record.is_finite() {
            return Ok(Err(Box::new(eval)));
        }
        if self.cfg.clip_grad_norm > 0.0 && eval.record.grad_norm > self.cfg.clip_grad_norm {
            let k = (self.cfg.clip_grad_norm / eval.record.grad_norm) as f32;
            eval.grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= k));
        }
        self.optim.update(&mut self.model.params.params, &eval.grads, eval.record.lr);
        self.model.update_running_stats(&eval.bn_stats);
        self.step += 1;
        Ok(Ok(eval.record))
    }
}

/// Files written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
    pub files: Vec<PathBuf>,
    pub records: Vec<StepRecord>,
}

/// Load the readable pairs of `cfg.dataset`.
pub fn load_pairs(cfg: &TrainConfig) -> Result<Vec<PairData>> {
    let slots = DatasetSource::parse(&cfg.dataset)?.load()?;
    let pairs: Vec<PairData> = slots.into_iter().filter_map(|s| s.data.ok()).collect();
    if pairs.is_empty() {
        return Err(Error::Config(format!("dataset `{}` has no readable pairs", cfg.dataset)));
    }
    Ok(pairs)
}

pub const LOG_NAME: &str = "train.ndjson";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub fn checkpoint_name(step: usize) -> String {
    format!("step-{step:06}.ckpt")
}

fn dump_state(run_dir: &Path, trainer: &Trainer, eval: &StepEval) -> Result<PathBuf> {
    let dir = run_dir.join(format!("nonfinite-step-{:06}", eval.record.step));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    trainer.checkpoint().save(&dir.join("state.ckpt"))?;
    let samples: Vec<serde_json::Value> = eval
        .samples
        .iter()
        .map(|(s, b)| serde_json::json!({"pair_id": s.pair_id, "homography": s.homography.rows(), "valid": b.n_valid()}))
        .collect();
    let info = serde_json::json!({"record": eval.record, "breakdowns": eval.breakdowns, "samples": samples});
    let p = dir.join("step.json");
    std::fs::write(&p, serde_json::to_string_pretty(&info).expect("json")).map_err(|e| Error::io(&p, e))?;
    for (i, (s, _)) in eval.samples.iter().enumerate() {
        save_gray_png(&s.image_a.map(|v| 0.5 + 0.2 * v), &dir.join(format!("sample{i}-a.png")))?;
        save_gray_png(&s.image_b.map(|v| 0.5 + 0.2 * v), &dir.join(format!("sample{i}-b.png")))?;
    }
    Ok(dir)
}

/// Train until `cfg.iterations`, optionally resuming from a checkpoint.
/// Every step appends one JSON line to `run_dir/train.ndjson`; checkpoints
/// go to `run_dir/step-NNNNNN.ckpt` every `checkpoint_every` steps and at
/// the end, the latest also to `run_dir/last.ckpt`. `on_step` sees each
/// record as it is logged.
pub fn train(cfg: TrainConfig, run_dir: &Path, resume: Option<&Checkpoint>, on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pairs = load_pairs(&cfg)?;
    train_pairs(cfg, pairs, run_dir, resume, on_step)
}

/// [`train`] on pairs already in memory; `cfg.dataset` is ignored.
pub fn train_pairs(cfg: TrainConfig, pairs: Vec<PairData>, run_dir: &Path, resume: Option<&Checkpoint>, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(cfg, pairs, ck)?,
        None => Trainer::new(cfg, pairs)?,
    };
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log = run_dir.join(LOG_NAME);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    let mut files = vec![log.clone()];
    let mut records = Vec::new();
    let last = run_dir.join(LAST_CHECKPOINT);
    while trainer.step < trainer.cfg.iterations {
        let record = match trainer.step()? {
            Ok(r) => r,
            Err(eval) => {
                let dump = dump_state(run_dir, &trainer, &eval)?;
                return Err(Error::NonFiniteLoss { step: eval.record.step, dump });
            }
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(&log, e))?;
        on_step(&record);
        records.push(record);
        if trainer.step % trainer.cfg.checkpoint_every == 0 || trainer.step == trainer.cfg.iterations {
            let ck = trainer.checkpoint();
            let p = run_dir.join(checkpoint_name(trainer.step));
            ck.save(&p)?;
            ck.save(&last)?;
            files.push(p);
        }
    }
    file.flush().map_err(|e| Error::io(&log, e))?;
    if !last.exists() {
        trainer.checkpoint().save(&last)?;
    }
    files.push(last.clone());
    Ok(TrainOutcome {
        last_checkpoint: last,
        log,
        files,
        records,
    })
}

//! Modality adapters, shared encoder and the two-branch detector.
//!
//! Every layer runs at full input resolution (dilated convolutions, no
//! downsampling):
//!
//! ```text
//! image ─ standardize ─ adapter[modality]: 6 × (conv3x3 → BN → ReLU)
//!       ─ encoder: 2 × (conv3x3 → BN → ReLU), conv3x3 ─ l2-normalize ─► D
//! D ─ conv1x1 ─ sigmoid ─────────────────────────────────────────────► prior
//! D ─ B × [conv3x3(dilation) → BN → ReLU → LNMS] ─ conv3x3 → 2ch
//!   ─ channel softmax ─ channel 0 ───────────────────────────────────► conditional
//! scores = prior ⊙ conditional
//! ```
//!
//! LNMS is conv3x3 → local softmax → BN → ReLU → IN → ReLU. Convolutions
//! followed by a normalization carry no bias (it would have no effect).

mod params;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use self::params::{Checkpoint, CheckpointHeader, EntryInfo, ParamStore, ParamVars, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_io::standardize;
use crate::nn::BatchStats;
use crate::tensor::{Scalar, Tensor};

pub const DESCRIPTOR_DIM: usize = 128;
pub const MIN_INPUT_SIZE: usize = 32;

/// A registered input modality and its channel count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub channels: usize,
}

impl Modality {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }
}

/// Layer widths and dilations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    pub adapter_channels: Vec<usize>,
    pub adapter_dilations: Vec<usize>,
    pub encoder_channels: Vec<usize>,
    pub encoder_dilations: Vec<usize>,
    pub detector_channels: usize,
    /// One entry per LNMS block.
    pub lnms_dilations: Vec<usize>,
    pub bn_momentum: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: vec![Modality::new("vis", 1), Modality::new("ir", 1)],
            adapter_channels: vec![32, 32, 64, 64, 128, 128],
            adapter_dilations: vec![1, 1, 1, 2, 2, 2],
            encoder_channels: vec![128, 128, DESCRIPTOR_DIM],
            encoder_dilations: vec![4, 4, 4],
            detector_channels: 64,
            lnms_dilations: vec![1, 2, 4],
            bn_momentum: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_modalities(mut self, modalities: Vec<Modality>) -> Self {
        self.modalities = modalities;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.modalities.is_empty() {
            return bad("at least one modality is required");
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.modalities.len() {
            return bad("duplicate modality names");
        }
        if self.modalities.iter().any(|m| m.channels == 0 || m.name.is_empty() || m.name.contains('/')) {
            return bad("modality names must be non-empty without '/', channels positive");
        }
        if self.adapter_channels.len() != self.adapter_dilations.len() || self.adapter_channels.is_empty() {
            return bad("adapter channels and dilations must have equal, nonzero length");
        }
        if self.encoder_channels.len() != self.encoder_dilations.len() || self.encoder_channels.is_empty() {
            return bad("encoder channels and dilations must have equal, nonzero length");
        }
        if *self.encoder_channels.last().unwrap() != DESCRIPTOR_DIM {
            return bad("the encoder must end with 128 channels");
        }
        if self.lnms_dilations.is_empty() || self.detector_channels == 0 {
            return bad("the conditional branch needs at least one LNMS block");
        }
        let all = self.adapter_dilations.iter().chain(&self.encoder_dilations).chain(&self.lnms_dilations);
        if all.clone().any(|&d| d == 0) {
            return bad("dilations must be positive");
        }
        Ok(())
    }

    pub fn modality(&self, name: &str) -> Result<&Modality> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Receptive-field radius (pixels) added by the conditional branch on
    /// top of the descriptor map.
    pub fn conditional_radius(&self) -> usize {
        // pre-conv, LNMS conv and the 3x3 local softmax per block, then the
        // output conv
        self.lnms_dilations.iter().map(|d| d + 1 + 1).sum::<usize>() + 1
    }

    /// Receptive-field radius of the prior branch on top of the descriptor
    /// map (a pointwise map).
    pub fn prior_radius(&self) -> usize {
        0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated by the caller.
    Train,
    /// Running statistics; deterministic.
    Eval,
}

/// Graph nodes of one forward pass over a batch of `n` images.
#[derive(Clone, Debug)]
pub struct FeatureVars {
    /// `[n, 128, h, w]`, unit norm per pixel.
    pub descriptors: Var,
    /// `[n, 1, h, w]`
    pub scores: Var,
    pub prior: Var,
    pub conditional: Var,
    /// Batch statistics of every batch norm (train mode only), keyed by the
    /// layer prefix.
    pub bn_stats: Vec<(String, BatchStats<f64>)>,
}

/// Plain-tensor output of one image.
#[derive(Clone, Debug)]
pub struct DenseFeatures {
    /// `[1, 128, h, w]`
    pub descriptors: Tensor<f32>,
    /// `[1, 1, h, w]`, `prior * conditional`.
    pub scores: Tensor<f32>,
    pub prior: Tensor<f32>,
    pub conditional: Tensor<f32>,
}

impl DenseFeatures {
    pub fn size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.scores.dims4();
        (h, w)
    }

    /// Descriptor at integer pixel `(x, y)`.
    pub fn descriptor_at(&self, x: usize, y: usize) -> Vec<f32> {
        let (_, c, h, w) = self.descriptors.dims4();
        assert!(x < w && y < h, "pixel out of bounds");
        (0..c).map(|ch| self.descriptors.plane(0, ch)[y * w + x]).collect()
    }
}

/// Network configuration plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let d = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn conv_layer<T: Scalar>(store: &mut ParamStore<T>, seed: u64, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
    let fan_in = (cin * k * k) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let name = format!("{prefix}/weight");
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
    let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::lit(rng.random_range(-bound..bound)));
    store.params.insert(name, w);
    if bias {
        let name = format!("{prefix}/bias");
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
        store.params.insert(name, Tensor::from_fn(&[cout], |_| T::lit(rng.random_range(-bound..bound))));
    }
}

fn bn_layer<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.params.insert(format!("{prefix}/weight"), Tensor::ones(&[c]));
    store.params.insert(format!("{prefix}/bias"), Tensor::zeros(&[c]));
    store.buffers.insert(format!("{prefix}/running_mean"), Tensor::zeros(&[c]));
    store.buffers.insert(format!("{prefix}/running_var"), Tensor::ones(&[c]));
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized parameters: conv weights and biases uniform in
    /// `±1/sqrt(fan_in)`, seeded per parameter name; BN scale 1, shift 0.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.init_seed;
        let mut p = ParamStore::new();
        for m in &config.modalities {
            let mut cin = m.channels;
            for (i, &c) in config.adapter_channels.iter().enumerate() {
                conv_layer(&mut p, seed, &format!("adapter/{}/conv{i}", m.name), cin, c, 3, false);
                bn_layer(&mut p, &format!("adapter/{}/bn{i}", m.name), c);
                cin = c;
            }
        }
        let mut cin = *config.adapter_channels.last().unwrap();
        let last = config.encoder_channels.len() - 1;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            conv_layer(&mut p, seed, &format!("encoder/conv{i}"), cin, c, 3, i == last);
            if i != last {
                bn_layer(&mut p, &format!("encoder/bn{i}"), c);
            }
            cin = c;
        }
        conv_layer(&mut p, seed, "detector/prior", DESCRIPTOR_DIM, 1, 1, true);
        let dc = config.detector_channels;
        let mut cin = DESCRIPTOR_DIM;
        for b in 0..config.lnms_dilations.len() {
            conv_layer(&mut p, seed, &format!("detector/cond/block{b}/conv"), cin, dc, 3, false);
            bn_layer(&mut p, &format!("detector/cond/block{b}/bn"), dc);
            conv_layer(&mut p, seed, &format!("detector/cond/block{b}/lnms/conv"), dc, dc, 3, false);
            bn_layer(&mut p, &format!("detector/cond/block{b}/lnms/bn"), dc);
            cin = dc;
        }
        conv_layer(&mut p, seed, "detector/cond/out", dc, 2, 3, true);
        Ok(Self { config, params: p })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn norm_relu(&self, g: &mut Graph<T>, vars: &ParamVars, x: Var, prefix: &str, mode: Mode, stats: &mut Vec<(String, BatchStats<f64>)>) -> Var {
        let gamma = vars.get(&format!("{prefix}/weight"));
        let beta = vars.get(&format!("{prefix}/bias"));
        match mode {
            Mode::Train => {
                let (y, s) = g.batch_norm_train(x, gamma, beta, true);
                let to64 = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap()).collect();
                stats.push((
                    prefix.to_string(),
                    BatchStats {
                        mean: to64(&s.mean),
                        var: to64(&s.var),
                    },
                ));
                y
            }
            Mode::Eval => {
                let rm = self.params.buffer(&format!("{prefix}/running_mean")).data().to_vec();
                let rv = self.params.buffer(&format!("{prefix}/running_var")).data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &rm, &rv, true)
            }
        }
    }

    /// Descriptor map of an `[n, c, h, w]` batch of one modality.
    pub fn describe(&self, g: &mut Graph<T>, vars: &ParamVars, image: &Tensor<T>, modality: &str, mode: Mode, stats: &mut Vec<(String, BatchStats<f64>)>) -> Result<Var> {
        let m = self.config.modality(modality)?;
        let (_, c, h, w) = image.dims4();
        if c != m.channels {
            return Err(Error::Config(format!("modality `{modality}` expects {} channels, got {c}", m.channels)));
        }
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(Error::Config(format!("input {h}x{w} is smaller than {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")));
        }
        let mut x = g.constant(standardize(image));
        for (i, &d) in self.config.adapter_dilations.iter().enumerate() {
            let pre = format!("adapter/{}", m.name);
            x = g.conv2d(x, vars.get(&format!("{pre}/conv{i}/weight")), None, d);
            x = self.norm_relu(g, vars, x, &format!("{pre}/bn{i}"), mode, stats);
        }
        let last = self.config.encoder_dilations.len() - 1;
        for (i, &d) in self.config.encoder_dilations.iter().enumerate() {
            let bias = (i == last).then(|| vars.get(&format!("encoder/conv{i}/bias")));
            x = g.conv2d(x, vars.get(&format!("encoder/conv{i}/weight")), bias, d);
            if i != last {
                x = self.norm_relu(g, vars, x, &format!("encoder/bn{i}"), mode, stats);
            }
        }
        Ok(g.l2_normalize_channels(x))
    }

    /// Pointwise prior `sigmoid(affine(d))`.
    pub fn raw_detector(&self, g: &mut Graph<T>, vars: &ParamVars, descriptors: Var) -> Var {
        let z = g.conv2d(descriptors, vars.get("detector/prior/weight"), Some(vars.get("detector/prior/bias")), 1);
        g.sigmoid(z)
    }

    /// One learnable non-maximum suppression block.
    pub fn lnms_block(&self, g: &mut Graph<T>, vars: &ParamVars, x: Var, prefix: &str, mode: Mode, stats: &mut Vec<(String, BatchStats<f64>)>) -> Var {
        let y = g.conv2d(x, vars.get(&format!("{prefix}/conv/weight")), None, 1);
        let y = g.local_softmax(y);
        let y = self.norm_relu(g, vars, y, &format!("{prefix}/bn"), mode, stats);
        g.instance_norm_relu(y)
    }

    /// `(conditional, prior, scores)`, each `[n, 1, h, w]`.
    pub fn super_detector(&self, g: &mut Graph<T>, vars: &ParamVars, descriptors: Var, mode: Mode, stats: &mut Vec<(String, BatchStats<f64>)>) -> (Var, Var, Var) {
        let prior = self.raw_detector(g, vars, descriptors);
        let mut x = descriptors;
        for (b, &d) in self.config.lnms_dilations.iter().enumerate() {
            let pre = format!("detector/cond/block{b}");
            x = g.conv2d(x, vars.get(&format!("{pre}/conv/weight")), None, d);
            x = self.norm_relu(g, vars, x, &format!("{pre}/bn"), mode, stats);
            x = self.lnms_block(g, vars, x, &format!("{pre}/lnms"), mode, stats);
        }
        let z = g.conv2d(x, vars.get("detector/cond/out/weight"), Some(vars.get("detector/cond/out/bias")), 1);
        let sm = g.softmax_channels(z);
        let conditional = g.select_channel(sm, 0);
        let scores = g.mul(prior, conditional);
        (conditional, prior, scores)
    }

    /// Full forward pass over an `[n, c, h, w]` batch of one modality.
    pub fn forward(&self, g: &mut Graph<T>, vars: &ParamVars, image: &Tensor<T>, modality: &str, mode: Mode) -> Result<FeatureVars> {
        let mut stats = Vec::new();
        let descriptors = self.describe(g, vars, image, modality, mode, &mut stats)?;
        let (conditional, prior, scores) = self.super_detector(g, vars, descriptors, mode, &mut stats);
        Ok(FeatureVars {
            descriptors,
            scores,
            prior,
            conditional,
            bn_stats: stats,
        })
    }

    /// Fold training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<f64>)]) {
        let m = T::lit(self.config.bn_momentum);
        for (prefix, s) in stats {
            for (suffix, vals) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let buf = self
                    .params
                    .buffers
                    .get_mut(&format!("{prefix}/{suffix}"))
                    .unwrap_or_else(|| panic!("no running statistics for `{prefix}`"));
                for (r, &v) in buf.data_mut().iter_mut().zip(vals.iter()) {
                    *r = (T::one() - m) * *r + m * T::lit(v);
                }
            }
        }
    }
}

impl Model<f32> {
    /// Inference on a single `[1, c, h, w]` image with running statistics.
    pub fn infer(&self, image: &Tensor<f32>, modality: &str) -> Result<DenseFeatures> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let f = self.forward(&mut g, &vars, image, modality, Mode::Eval)?;
        Ok(DenseFeatures {
            descriptors: g.value(f.descriptors).clone(),
            scores: g.value(f.scores).clone(),
            prior: g.value(f.prior).clone(),
            conditional: g.value(f.conditional).clone(),
        })
    }

    /// Checkpoint of parameters and running statistics.
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut entries: BTreeMap<String, Tensor<f32>> = self.params.params.clone();
        entries.extend(self.params.buffers.iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut meta = meta;
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert("model".into(), serde_json::to_value(&self.config).expect("config serializes"));
        }
        Checkpoint {
            config_hash: self.config.hash(),
            meta,
            entries,
        }
    }

    /// Rebuild a model from a checkpoint whose meta carries the model
    /// configuration.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.meta.get("model").cloned().ok_or_else(|| Error::format("checkpoint", "no model configuration in meta"))?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut model = Model::new(config)?;
        for (k, slot) in model.params.params.iter_mut().chain(model.params.buffers.iter_mut()) {
            let t = ck.entries.get(k).ok_or_else(|| Error::format("checkpoint", format!("missing entry `{k}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format("checkpoint", format!("shape mismatch for `{k}`: {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            modalities: vec![Modality::new("vis", 1), Modality::new("ir", 1)],
            adapter_channels: vec![4, 4, 4, 4, 8, 8],
            adapter_dilations: vec![1, 1, 1, 2, 2, 2],
            encoder_channels: vec![8, 8, DESCRIPTOR_DIM],
            encoder_dilations: vec![4, 4, 4],
            detector_channels: 4,
            lnms_dilations: vec![1, 2, 4],
            bn_momentum: 0.1,
            init_seed: 3,
        }
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 1, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_layout() {
        let m = Model::<f32>::new(ModelConfig::default()).unwrap();
        let convs = m.params.params.keys().filter(|k| k.starts_with("adapter/vis/conv")).count();
        assert_eq!(convs, 6);
        let enc = m.params.params.keys().filter(|k| k.starts_with("encoder/conv") && k.ends_with("weight")).count();
        assert_eq!(enc, 3);
        assert_eq!(m.params.param("detector/cond/block0/conv/weight").shape(), &[64, 128, 3, 3]);
        assert!(m.config.conditional_radius() > m.config.prior_radius());
    }

    #[test]
    fn shapes_norms_and_probabilities() {
        let m = Model::<f32>::new(tiny_config()).unwrap();
        let f = m.infer(&test_image(40, 36, 1), "vis").unwrap();
        assert_eq!(f.descriptors.dims4(), (1, 128, 40, 36));
        assert_eq!(f.scores.dims4(), (1, 1, 40, 36));
        for y in 0..40 {
            for x in 0..36 {
                let n: f32 = f.descriptor_at(x, y).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        for ((&s, &p), &c) in f.scores.data().iter().zip(f.prior.data()).zip(f.conditional.data()) {
            assert!((0.0..=1.0).contains(&s) && p > 0.0 && p < 1.0 && (0.0..=1.0).contains(&c));
            assert!((s - p * c).abs() < 1e-7);
        }
    }

    #[test]
    fn unregistered_modality_and_small_input() {
        let m = Model::<f32>::new(tiny_config()).unwrap();
        assert!(matches!(m.infer(&test_image(40, 40, 2), "sar"), Err(Error::UnknownModality(_))));
        assert!(m.infer(&test_image(20, 40, 2), "vis").is_err());
    }

    #[test]
    fn adapters_are_unshared() {
        let m = Model::<f32>::new(tiny_config()).unwrap();
        let img = test_image(36, 36, 3);
        let a = m.infer(&img, "vis").unwrap();
        let b = m.infer(&img, "ir").unwrap();
        assert_ne!(a.descriptors, b.descriptors);
    }

    #[test]
    fn eval_is_deterministic() {
        let m = Model::<f32>::new(tiny_config()).unwrap();
        let img = test_image(33, 35, 4);
        let a = m.infer(&img, "vis").unwrap();
        let b = m.infer(&img, "vis").unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.descriptors, b.descriptors);
    }

    #[test]
    fn raw_detector_zero_weights_gives_half() {
        let mut m = Model::<f64>::new(tiny_config()).unwrap();
        m.params.params.insert("detector/prior/weight".into(), Tensor::zeros(&[1, 128, 1, 1]));
        m.params.params.insert("detector/prior/bias".into(), Tensor::zeros(&[1]));
        let mut g = Graph::new();
        let vars = m.params.register(&mut g, false);
        let d = g.constant(Tensor::from_fn(&[1, 128, 4, 4], |i| (i as f64).sin()));
        let p = m.raw_detector(&mut g, &vars, d);
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn raw_detector_is_pointwise() {
        let m = Model::<f64>::new(tiny_config()).unwrap();
        let mut g = Graph::new();
        let vars = m.params.register(&mut g, false);
        let col: Vec<f64> = (0..128).map(|i| ((i * 7 % 13) as f64 - 6.0) / 20.0).collect();
        let d = g.constant(Tensor::from_fn(&[1, 128, 5, 6], |i| col[i / 30]));
        let p = m.raw_detector(&mut g, &vars, d);
        let first = g.value(p).data()[0];
        assert!(first > 0.0 && first < 1.0);
        assert!(g.value(p).data().iter().all(|&v| v == first));
    }

    #[test]
    fn forced_unit_prior_gives_conditional_scores() {
        let mut m = Model::<f64>::new(tiny_config()).unwrap();
        m.params.params.insert("detector/prior/weight".into(), Tensor::zeros(&[1, 128, 1, 1]));
        m.params.params.insert("detector/prior/bias".into(), Tensor::full(&[1], 1e3));
        let mut g = Graph::new();
        let vars = m.params.register(&mut g, false);
        let img = test_image(34, 34, 5).cast::<f64>();
        let f = m.forward(&mut g, &vars, &img, "ir", Mode::Eval).unwrap();
        assert_eq!(g.value(f.scores), g.value(f.conditional));
    }

    #[test]
    fn checkpoint_restores_model() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut m = Model::<f32>::new(tiny_config()).unwrap();
        m.params.buffers.get_mut("encoder/bn0/running_mean").unwrap().data_mut()[0] = 0.25;
        m.to_checkpoint(serde_json::json!({})).save(&p).unwrap();
        let ck = Checkpoint::load(&p).unwrap();
        assert_eq!(ck.config_hash, m.config.hash());
        let back = Model::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn running_stats_update() {
        let mut m = Model::<f32>::new(tiny_config()).unwrap();
        let stats = vec![(
            "encoder/bn0".to_string(),
            BatchStats {
                mean: vec![1.0; 8],
                var: vec![3.0; 8],
            },
        )];
        m.update_running_stats(&stats);
        assert!((m.params.buffer("encoder/bn0/running_mean").data()[0] - 0.1).abs() < 1e-7);
        assert!((m.params.buffer("encoder/bn0/running_var").data()[0] - 1.2).abs() < 1e-6);
    }
}

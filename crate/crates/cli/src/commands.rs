use std::path::{Path, PathBuf};

use mmfeat::benchmark::{
    estimate_homography, parallel_map, prepare_pair, ransac_rng, re_h, run_benchmark, run_from_features, write_ground_truth, write_plots, BenchmarkReport, Extractor,
    FeatureManifest, ModelExtractor, Overlap,
};
use mmfeat::dataset::{DatasetSource, PairSlot, MANIFEST_HINT};
use mmfeat::features::{match_bidirectional, KeypointSet};
use mmfeat::geometry::Homography;
use mmfeat::model::{Checkpoint, Model};
use mmfeat::training::{train_pairs, StepRecord};
use mmfeat::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{env_overrides, RunConfig};
use crate::{Cli, Command, Common, EvaluateArgs, ExtractArgs, MatchArgs, PlotArgs, TrainArgs};

/// Name of the run manifest inside every run directory.
pub const RUN_MANIFEST: &str = "run.json";
pub const CONFIG_NAME: &str = "config.toml";
pub const FEATURE_MANIFEST: &str = "features.toml";

pub struct Failure {
    pub error: Error,
    pub hint: Option<&'static str>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure { error, hint: None }
    }
}

type Result<T> = std::result::Result<T, Failure>;

impl Failure {
    /// 2 for aborts while running, 1 for bad input or configuration.
    pub fn exit_code(&self) -> u8 {
        match self.error {
            Error::NonFiniteLoss { .. }
            | Error::DegenerateHomography { .. }
            | Error::InsufficientOverlap { .. }
            | Error::SingularHomography { .. }
            | Error::PointAtInfinity { .. }
            | Error::Registration(_) => 2,
            _ => 1,
        }
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.into(), source }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.into()).to_string()
}

/// Defaults < config file < MMFEAT_SET < --seed < --set < dedicated flags.
fn resolve(common: &Common, flags: Vec<String>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&env_overrides())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.benchmark.seed = s;
    }
    cfg = cfg.with_overrides(&common.set)?.with_overrides(&flags)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| Path::new("runs").join(command));
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    Ok(dir)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    files: Vec<String>,
    skipped: Vec<(String, String)>,
}

/// Write the effective configuration and `run.json` listing every file
/// produced, relative to `dir`.
fn finish(dir: &Path, command: &str, cfg: &RunConfig, mut files: Vec<PathBuf>, skipped: Vec<(String, String)>) -> Result<()> {
    let text = cfg.to_toml();
    let cfg_path = dir.join(CONFIG_NAME);
    std::fs::write(&cfg_path, &text).map_err(|e| io(&cfg_path, e))?;
    files.push(cfg_path);
    let mut rel: Vec<String> = files.iter().map(|f| f.strip_prefix(dir).unwrap_or(f).display().to_string()).collect();
    rel.sort();
    rel.dedup();
    let m = RunManifest {
        command,
        config_hash: hex::encode(Sha256::digest(text.as_bytes())),
        files: rel,
        skipped,
    };
    let p = dir.join(RUN_MANIFEST);
    std::fs::write(&p, serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n").map_err(|e| io(&p, e))?;
    Ok(())
}

fn load_dataset(uri: &str) -> Result<Vec<PairSlot>> {
    let with_hint = |error| Failure {
        error,
        hint: (!uri.starts_with("synth://")).then_some(MANIFEST_HINT),
    };
    DatasetSource::parse(uri).and_then(|s| s.load()).map_err(with_hint)
}

fn load_model(path: &Path) -> Result<(Model<f32>, String)> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    let ck = Checkpoint::load(path)?;
    Ok((Model::from_checkpoint(&ck)?, hex::encode(Sha256::digest(&bytes))))
}

/// File-name-safe form of a pair id.
fn stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(&cli.common, a),
        Command::Extract(a) => extract(&cli.common, a),
        Command::Match(a) => match_features(&cli.common, a),
        Command::Evaluate(a) => evaluate(&cli.common, a),
        Command::Plot(a) => plot(&cli.common, a),
    }
}

fn train(common: &Common, a: &TrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(v) = &a.dataset {
        flags.push(format!("train.dataset={}", quoted(v)));
    }
    if let Some(v) = &a.objective {
        flags.push(format!("train.objective={}", quoted(v)));
    }
    for (key, v) in [("iterations", a.iterations), ("crop_size", a.crop_size), ("batch_size", a.batch_size)] {
        if let Some(v) = v {
            flags.push(format!("train.{key}={v}"));
        }
    }
    for (key, v) in [("loss.lambda", a.lambda), ("lr_init", a.lr)] {
        if let Some(v) = v {
            flags.push(format!("train.{key}={v:?}"));
        }
    }
    let cfg = resolve(common, flags)?;
    let dir = run_dir(common, "train")?;
    let slots = load_dataset(&cfg.train.dataset)?;
    let mut skipped = Vec::new();
    let mut pairs = Vec::new();
    for s in slots {
        match s.data {
            Ok(p) => pairs.push(p),
            Err(reason) => {
                eprintln!("warning: skipping pair `{}`: {reason}", s.id);
                skipped.push((s.id, reason));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Failure {
            error: Error::Config(format!("dataset `{}` has no readable pairs", cfg.train.dataset)),
            hint: Some(MANIFEST_HINT),
        });
    }
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let every = a.log_every;
    let progress = |r: &StepRecord| {
        if every > 0 && (r.step % every == 0 || r.step + 1 == cfg.train.iterations) {
            eprintln!("step {:6}  loss {:.5}  score {:.4}  lr {:.2e}", r.step, r.total, r.mean_score, r.lr);
        }
    };
    let outcome = train_pairs(cfg.train.clone(), pairs, &dir, resume.as_ref(), progress)?;
    println!("checkpoint: {}", outcome.last_checkpoint.display());
    finish(&dir, "train", &cfg, outcome.files, skipped)
}

fn extract(common: &Common, a: &ExtractArgs) -> Result<()> {
    let cfg = resolve(common, a.k.map(|k| vec![format!("benchmark.k={k}")]).unwrap_or_default())?;
    let dir = run_dir(common, "extract")?;
    let (model, hash) = load_model(&a.checkpoint)?;
    let slots = load_dataset(&a.dataset)?;
    let b = &cfg.benchmark;
    let ex = ModelExtractor {
        model: &model,
        nms_radius: b.nms_radius,
        border: b.border,
    };
    let results = parallel_map(&slots, b.workers, |slot| -> mmfeat::Result<_> {
        let data = slot.data.clone().map_err(Error::Config)?;
        let pair = prepare_pair(data, &b.transform, b.seed)?;
        let kp_a = ex.extract(&pair.image_a, &pair.modality_a, b.k)?;
        let kp_b = ex.extract(&pair.image_b, &pair.modality_b, b.k)?;
        Ok((pair, kp_a, kp_b))
    });
    let mut manifest = FeatureManifest::default();
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for (slot, r) in slots.iter().zip(results) {
        let (pair, kp_a, kp_b) = match r {
            Ok(v) => v,
            Err(e) => {
                eprintln!("warning: skipping pair `{}`: {e}", slot.id);
                skipped.push((slot.id.clone(), e.to_string()));
                continue;
            }
        };
        let s = stem(&pair.id);
        let (fa, fb) = (PathBuf::from(format!("{s}.a.feat")), PathBuf::from(format!("{s}.b.feat")));
        kp_a.save(&dir.join(&fa), Some(&hash))?;
        kp_b.save(&dir.join(&fb), Some(&hash))?;
        let mut entry = write_ground_truth(&dir, &s, &pair.gt, fa, fb)?;
        entry.id = pair.id.clone();
        files.extend([&entry.features_a, &entry.features_b, &entry.homography].map(|p| dir.join(p)));
        files.extend(entry.landmarks.iter().map(|p| dir.join(p)));
        manifest.pairs.push(entry);
    }
    let mpath = dir.join(FEATURE_MANIFEST);
    manifest.write(&mpath)?;
    files.push(mpath.clone());
    println!("features: {} ({} pairs, {} skipped)", mpath.display(), manifest.pairs.len(), skipped.len());
    finish(&dir, "extract", &cfg, files, skipped)
}

#[derive(Serialize)]
struct MatchSummary {
    n_kp_a: usize,
    n_kp_b: usize,
    matches: usize,
    registered: bool,
    inliers: Option<usize>,
    re_h: Option<f64>,
    /// (threshold, MS) when the ground truth is given.
    ms: Vec<(f64, f64)>,
}

fn match_features(common: &Common, a: &MatchArgs) -> Result<()> {
    let cfg = resolve(common, vec![])?;
    let dir = run_dir(common, "match")?;
    let (kp_a, _) = KeypointSet::load(&a.a)?;
    let (kp_b, _) = KeypointSet::load(&a.b)?;
    if kp_a.dim != kp_b.dim {
        return Err(Error::Format {
            what: "features",
            detail: format!("descriptor dimensions differ ({} vs {})", kp_a.dim, kp_b.dim),
        }
        .into());
    }
    let gt = a.homography.as_deref().map(Homography::read).transpose()?;
    let m = match_bidirectional(&kp_a, &kp_b);
    let b = &cfg.benchmark;
    let est = estimate_homography(&m, &kp_a, &kp_b, &b.ransac, &mut ransac_rng(b.seed, "match")).ok();

    let mut csv = String::from("a_index,b_index,x_a,y_a,x_b,y_b,distance\n");
    for (&[i, j], d) in m.pairs.iter().zip(&m.distances) {
        let (p, q) = (kp_a.coords[i], kp_b.coords[j]);
        csv += &format!("{i},{j},{},{},{},{},{d}\n", p[0], p[1], q[0], q[1]);
    }
    let mut files = vec![dir.join("matches.csv")];
    std::fs::write(&files[0], csv).map_err(|e| io(&files[0], e))?;
    let inliers = est.as_ref().map(|h| {
        m.pairs
            .iter()
            .filter(|&&[i, j]| h.project(kp_a.coords[i]).is_ok_and(|p| ((p[0] - kp_b.coords[j][0]).powi(2) + (p[1] - kp_b.coords[j][1]).powi(2)).sqrt() <= b.ransac.threshold))
            .count()
    });
    if let Some(h) = &est {
        let p = dir.join("estimated.homography.txt");
        h.write(&p)?;
        files.push(p);
    }
    let ms = match &gt {
        Some(h) => {
            let ov = Overlap::new(&kp_a, &kp_b, h);
            let counts = mmfeat::benchmark::correct_match_counts(&m, &kp_a, &kp_b, h, &b.thresholds);
            b.thresholds.iter().zip(counts).map(|(&t, c)| (t, ov.symmetric_ratio(c))).collect()
        }
        None => vec![],
    };
    let summary = MatchSummary {
        n_kp_a: kp_a.len(),
        n_kp_b: kp_b.len(),
        matches: m.len(),
        registered: est.is_some(),
        inliers,
        re_h: gt.as_ref().map(|g| est.as_ref().map_or(f64::INFINITY, |h| re_h(g, h))),
        ms,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    print!("{text}");
    let p = dir.join("match.json");
    std::fs::write(&p, text).map_err(|e| io(&p, e))?;
    files.push(p);
    finish(&dir, "match", &cfg, files, vec![])
}

fn evaluate(common: &Common, a: &EvaluateArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(k) = a.k {
        flags.push(format!("benchmark.k={k}"));
    }
    if let Some(w) = a.workers {
        flags.push(format!("benchmark.workers={w}"));
    }
    let cfg = resolve(common, flags)?;
    let dir = run_dir(common, "evaluate")?;
    let report = match (&a.features, &a.checkpoint, &a.dataset) {
        (Some(f), _, _) => run_from_features(f, &cfg.benchmark)?,
        (None, Some(ck), Some(ds)) => {
            let (model, _) = load_model(ck)?;
            let slots = load_dataset(ds)?;
            let ex = ModelExtractor {
                model: &model,
                nms_radius: cfg.benchmark.nms_radius,
                border: cfg.benchmark.border,
            };
            run_benchmark(&slots, &ex, &cfg.benchmark)?
        }
        _ => return Err(Error::Config("evaluate needs --features, or --checkpoint with --dataset".into()).into()),
    };
    for s in &report.skipped {
        eprintln!("warning: skipped pair `{}`: {}", s.pair_id, s.reason);
    }
    let files = report.write(&dir)?;
    print!("{}", report.summary_text());
    let skipped = report.skipped.iter().map(|s| (s.pair_id.clone(), s.reason.clone())).collect();
    finish(&dir, "evaluate", &cfg, files, skipped)
}

fn plot(common: &Common, a: &PlotArgs) -> Result<()> {
    let cfg = resolve(common, vec![])?;
    let mut reports = Vec::new();
    for spec in &a.reports {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) if !l.is_empty() => (Some(l.to_string()), PathBuf::from(p)),
            _ => (None, PathBuf::from(spec)),
        };
        let file = if path.is_dir() { path.join("report.csv") } else { path.clone() };
        let text = std::fs::read_to_string(&file).map_err(|e| io(&file, e))?;
        let report = BenchmarkReport::from_csv(&text, cfg.benchmark.success_threshold)?;
        let label = label.unwrap_or_else(|| {
            let base = if path.is_dir() { path.as_path() } else { path.parent().unwrap_or(&path) };
            base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| spec.clone())
        });
        reports.push((label, report));
    }
    if reports.iter().any(|(_, r)| r.rows.is_empty()) {
        return Err(Error::Config("a report has no evaluated pairs; nothing to plot".into()).into());
    }
    let dir = run_dir(common, "plot")?;
    let files = write_plots(&reports, &dir)?;
    for f in &files {
        println!("{}", f.display());
    }
    finish(&dir, "plot", &cfg, files, vec![])
}

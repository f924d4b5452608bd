//! Commands behind the `cig` binary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cig_core::config::{Config, FusionMode, SyntheticSource};
use cig_core::data::{
    build_synthetic_dataset, load_folder_dataset, save_folder_dataset, split_folds, Image, LoadOptions,
    OrdinalDataset, SyntheticSpec,
};
use cig_core::evaluation::{average_reports, per_category_metrics, PerCategoryReport, PredictionRecord};
use cig_core::losses::ssim_batch;
use cig_core::nn::device;
use cig_core::sampler::ReferenceSampler;
use cig_core::training::{batch_tensor, CigModel, Trainer};
use cig_core::{checkpoint, Ablation, CigError};
use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub mod sweep;

pub const RUNS_DIR_ENV: &str = "CIG_RUNS_DIR";

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, config or input files (exit code 2).
    #[error("{0}")]
    Usage(String),
    /// Anything that went wrong while running (exit code 3).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<CigError> for CliError {
    fn from(e: CigError) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime(path, e))?;
    fs::write(path, text + "\n").map_err(|e| runtime(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Output root for runs: explicit flag, then `CIG_RUNS_DIR`, then `./runs`.
pub fn runs_root(out: Option<&Path>) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUNS_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Record of one command invocation; the config snapshot is fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub command: String,
    pub config: Config,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Artifact name → path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn start(name: &str, command: &str, config: &Config) -> CliResult<Self> {
        Ok(RunManifest {
            name: name.to_string(),
            command: command.to_string(),
            config: config.clone(),
            config_hash: config.content_hash()?,
            dataset_hash: None,
            started_at: now(),
            finished_at: None,
            artifacts: BTreeMap::new(),
        })
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }
}

/// Loads a config file (or the defaults) and applies command-line overrides.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, ablation: Option<Ablation>) -> CliResult<Config> {
    let mut cfg = match path {
        Some(p) => Config::from_file(p).map_err(|e| match e {
            CigError::Io { .. } => CliError::Usage(e.to_string()),
            other => other.into(),
        })?,
        None => Config::default(),
    };
    if let Some(a) = ablation {
        cfg.apply_ablation(a);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg.resolve()?)
}

/// Builds or loads the dataset a config points at.
pub fn load_dataset(cfg: &Config) -> CliResult<OrdinalDataset> {
    if let Some(src) = &cfg.data.synthetic {
        return Ok(build_synthetic_dataset(&src.spec, src.n_total)?);
    }
    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| CliError::Usage("config must set data.root or data.synthetic".into()))?;
    if !root.is_dir() {
        return Err(CliError::Usage(format!("dataset root {} does not exist", root.display())));
    }
    let opts = LoadOptions {
        channels: cfg.model.in_channels,
        size: Some(cfg.model.input_size as u32),
    };
    Ok(load_folder_dataset(root, opts)?)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SynthFile {
    Source(SyntheticSource),
    Spec(SyntheticSpec),
}

/// Writes a synthetic dataset in folder layout and returns its manifest hash.
pub fn cmd_synth(spec_path: &Path, out: &Path, n_total: usize, seed: Option<u64>) -> CliResult<String> {
    let (mut spec, n_total) = match read_json::<SynthFile>(spec_path)? {
        SynthFile::Source(s) => (s.spec, s.n_total),
        SynthFile::Spec(s) => (s, n_total),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let ds = build_synthetic_dataset(&spec, n_total)?;
    let manifest = save_folder_dataset(&ds, out, Some(spec.seed))?;
    write_json(&out.join("spec.json"), &SyntheticSource { spec, n_total })?;
    log::info!("wrote {} images to {}", ds.len(), out.display());
    Ok(manifest.content_hash)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub id: String,
    pub true_label: u32,
    pub predicted_label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub k: usize,
    pub fold: usize,
    pub records: Vec<PredictionEntry>,
}

impl Predictions {
    pub fn records(&self) -> Vec<PredictionRecord> {
        self.records
            .iter()
            .map(|r| PredictionRecord::new(r.true_label, r.predicted_label))
            .collect()
    }
}

pub const RUN_ARTIFACTS: [&str; 4] = ["manifest.json", "config.json", "trace.jsonl", "predictions.json"];

/// Trains on the configured validation fold and writes a run directory with
/// manifest, resolved config, trace, checkpoints, predictions and report.
pub fn cmd_train(cfg: &Config, name: &str, runs_root: &Path) -> CliResult<PathBuf> {
    let ds = load_dataset(cfg)?;
    let split = split_folds(&ds, cfg.eval.n_folds, cfg.train.seed)?;
    for w in &split.warnings {
        log::warn!("fold split: {w:?}");
    }
    let fold = &split.folds[cfg.eval.fold];
    let trainer = Trainer::new(cfg, &ds, fold)?;

    let dir = runs_root.join(name);
    if dir.join("manifest.json").exists() {
        fs::remove_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
    let mut manifest = RunManifest::start(name, "train", cfg)?;
    manifest.dataset_hash = Some(ds.content_hash());
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("manifest.json"), &manifest)?;

    let trace_path = dir.join("trace.jsonl");
    let mut trace = BufWriter::new(File::create(&trace_path).map_err(|e| runtime(&trace_path, e))?);
    let trainer = trainer.with_checkpoint_dir(&dir);
    let state = trainer.initial_state()?;
    let outcome = trainer.run(state, |rec| {
        let line = serde_json::to_string(rec)?;
        writeln!(trace, "{line}").map_err(|e| CigError::io(&trace_path, e))
    })?;
    trace.flush().map_err(|e| runtime(&trace_path, e))?;

    let records = outcome.state.model.evaluate(&ds, &fold.validation)?;
    let predictions = Predictions {
        k: ds.k(),
        fold: cfg.eval.fold,
        records: fold
            .validation
            .iter()
            .zip(&records)
            .map(|(&i, r)| PredictionEntry {
                id: ds.sample(i).id.clone(),
                true_label: r.true_label,
                predicted_label: r.predicted_label,
            })
            .collect(),
    };
    write_json(&dir.join("predictions.json"), &predictions)?;
    write_report(&outcome.report, &dir)?;

    let ckpt = format!("ckpt_{}", outcome.state.step);
    for (k, v) in [
        ("config", "config.json"),
        ("trace", "trace.jsonl"),
        ("predictions", "predictions.json"),
        ("report", "report.json"),
        ("report_csv", "report.csv"),
        ("checkpoint", ckpt.as_str()),
    ] {
        manifest.artifacts.insert(k.to_string(), v.to_string());
    }
    manifest.finish();
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!(
        "run {name}: val acc {:.2}, mae {:.3}",
        outcome.report.overall.acc,
        outcome.report.overall.mae
    );
    Ok(dir)
}

fn write_report(report: &PerCategoryReport, dir: &Path) -> CliResult<()> {
    write_json(&dir.join("report.json"), report)?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| runtime(&csv, e))
}

/// Rebuilds the per-category report of a finished run.
pub fn cmd_report(run_dir: &Path, gap: Option<f64>, out: Option<&Path>) -> CliResult<PerCategoryReport> {
    let missing: Vec<&str> = RUN_ARTIFACTS
        .iter()
        .copied()
        .filter(|a| !run_dir.join(a).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Runtime(format!(
            "incomplete run {}: missing {}",
            run_dir.display(),
            missing.join(", ")
        )));
    }
    let manifest: RunManifest = read_json(&run_dir.join("manifest.json"))?;
    if manifest.finished_at.is_none() {
        return Err(CliError::Runtime(format!(
            "incomplete run {}: training did not finish",
            run_dir.display()
        )));
    }
    let cfg: Config = read_json(&run_dir.join("config.json"))?;
    let predictions: Predictions = read_json(&run_dir.join("predictions.json"))?;
    let mut report = per_category_metrics(&predictions.records(), predictions.k)?;
    report.flag_minorities(gap.unwrap_or(cfg.eval.gap_threshold));
    let dest = out.unwrap_or(run_dir);
    fs::create_dir_all(dest).map_err(|e| runtime(dest, e))?;
    write_report(&report, dest)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedLabels {
    pub main: u32,
    pub reference: u32,
    pub fused: u32,
}

/// Sidecar written next to a fusion image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSidecar {
    pub main: String,
    pub reference: String,
    pub mode: FusionMode,
    pub ssim_main_fused: f64,
    pub ssim_ref_fused: f64,
    pub predicted: PredictedLabels,
}

fn check_image(img: &Image, cfg: &Config, path: &Path) -> CliResult<()> {
    let s = cfg.model.input_size;
    let expected = (cfg.model.in_channels, s, s);
    if img.shape() != expected {
        return Err(CliError::Usage(format!(
            "{}: image is {:?} (channels, height, width) but the checkpoint expects {expected:?}",
            path.display(),
            img.shape()
        )));
    }
    Ok(())
}

fn image_batch(images: &[&Image]) -> CliResult<Tensor> {
    let (c, h, w) = images[0].shape();
    let data: Vec<f64> = images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &device()).map_err(CigError::from)?)
}

fn tensor_images(t: &Tensor) -> CliResult<Vec<Image>> {
    let (b, c, h, w) = t.dims4().map_err(CigError::from)?;
    let flat: Vec<f64> = t.flatten_all().and_then(|f| f.to_vec1()).map_err(CigError::from)?;
    let n = c * h * w;
    (0..b)
        .map(|i| Ok(Image::new(c, h, w, flat[i * n..(i + 1) * n].to_vec())?))
        .collect()
}

/// Fuses one main/reference pair with a checkpointed model.
pub fn cmd_fuse(
    ckpt: &Path,
    main: &Path,
    reference: &Path,
    out: &Path,
    mode: Option<FusionMode>,
) -> CliResult<FusionSidecar> {
    let (cfg, state) = checkpoint::load_checkpoint(ckpt)?;
    let mode = mode.or(cfg.fusion.mode).unwrap_or(FusionMode::Sf);
    let x_m = Image::load(main, cfg.model.in_channels, None)?;
    let x_r = Image::load(reference, cfg.model.in_channels, None)?;
    check_image(&x_m, &cfg, main)?;
    check_image(&x_r, &cfg, reference)?;
    let tm = image_batch(&[&x_m])?;
    let tr = image_batch(&[&x_r])?;
    let tf = state.model.fuse_images(&tm, &tr, mode)?;
    let fused = tensor_images(&tf)?.remove(0);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    }
    fused.save_png(out)?;
    let p = cfg.ssim_params();
    let score = |a: &Tensor, b: &Tensor| -> CliResult<f64> {
        Ok(ssim_batch(a, b, &p)?.to_vec1::<f64>().map_err(CigError::from)?[0])
    };
    let all = Tensor::cat(&[&tm, &tr, &tf], 0).map_err(CigError::from)?;
    let preds = state.model.predict(&all)?;
    let sidecar = FusionSidecar {
        main: main.display().to_string(),
        reference: reference.display().to_string(),
        mode,
        ssim_main_fused: score(&tm, &tf)?,
        ssim_ref_fused: score(&tr, &tf)?,
        predicted: PredictedLabels {
            main: preds[0],
            reference: preds[1],
            fused: preds[2],
        },
    };
    write_json(&out.with_extension("json"), &sidecar)?;
    Ok(sidecar)
}

/// Outcome of fusing one dataset pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub main_id: String,
    pub main_label: u32,
    pub ref_id: String,
    pub ref_label: u32,
    pub predicted_fused: u32,
    pub ssim_main_fused: f64,
    pub ssim_ref_fused: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pairs: usize,
    /// Fusion images classified as the reference label.
    pub to_reference: usize,
    /// Fusion images classified as the main label.
    pub to_main: usize,
    pub mean_ssim_main_fused: f64,
    pub mean_ssim_ref_fused: f64,
}

impl PairSummary {
    pub fn of(outcomes: &[PairOutcome]) -> Self {
        let n = outcomes.len().max(1) as f64;
        PairSummary {
            pairs: outcomes.len(),
            to_reference: outcomes.iter().filter(|o| o.predicted_fused == o.ref_label).count(),
            to_main: outcomes.iter().filter(|o| o.predicted_fused == o.main_label).count(),
            mean_ssim_main_fused: outcomes.iter().map(|o| o.ssim_main_fused).sum::<f64>() / n,
            mean_ssim_ref_fused: outcomes.iter().map(|o| o.ssim_ref_fused).sum::<f64>() / n,
        }
    }
}

/// Fuses `n_pairs` main images drawn (seeded) from `pool` with adjacent-category
/// references from the same pool. Returns the outcomes and the fusion images.
pub fn fuse_pairs(
    model: &CigModel,
    cfg: &Config,
    ds: &OrdinalDataset,
    pool: &[usize],
    n_pairs: usize,
    seed: u64,
    mode: FusionMode,
) -> CliResult<(Vec<PairOutcome>, Vec<Image>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = pool.to_vec();
    order.shuffle(&mut rng);
    let mut sampler = ReferenceSampler::new(cfg.sampler.kind, ds, pool);
    let (mut mains, mut refs) = (Vec::new(), Vec::new());
    for &i in &order {
        if mains.len() == n_pairs {
            break;
        }
        match sampler.draw(ds.sample(i).label, &mut rng) {
            Ok(r) => {
                mains.push(i);
                refs.push(r);
            }
            Err(CigError::NoReferenceAvailable(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let mut outcomes = Vec::with_capacity(mains.len());
    let mut images = Vec::with_capacity(mains.len());
    let p = cfg.ssim_params();
    for (m_chunk, r_chunk) in mains.chunks(32).zip(refs.chunks(32)) {
        let xm = batch_tensor(ds, m_chunk)?;
        let xr = batch_tensor(ds, r_chunk)?;
        let xf = model.fuse_images(&xm, &xr, mode)?;
        let preds = model.predict(&xf)?;
        let s_m: Vec<f64> = ssim_batch(&xm, &xf, &p)?.to_vec1().map_err(CigError::from)?;
        let s_r: Vec<f64> = ssim_batch(&xr, &xf, &p)?.to_vec1().map_err(CigError::from)?;
        for (j, (&m, &r)) in m_chunk.iter().zip(r_chunk).enumerate() {
            outcomes.push(PairOutcome {
                main_id: ds.sample(m).id.clone(),
                main_label: ds.sample(m).label,
                ref_id: ds.sample(r).id.clone(),
                ref_label: ds.sample(r).label,
                predicted_fused: preds[j],
                ssim_main_fused: s_m[j],
                ssim_ref_fused: s_r[j],
            });
        }
        images.extend(tensor_images(&xf)?);
    }
    Ok((outcomes, images))
}

/// Dumps fusion images for pairs drawn from a folder dataset, named
/// `<main_id>_to_<ref_label>.png`, plus an `index.json` summary.
pub fn cmd_fuse_dataset(
    ckpt: &Path,
    dataset: &Path,
    out: &Path,
    n_pairs: usize,
    seed: Option<u64>,
    mode: Option<FusionMode>,
) -> CliResult<PairSummary> {
    let (cfg, state) = checkpoint::load_checkpoint(ckpt)?;
    let mode = mode.or(cfg.fusion.mode).unwrap_or(FusionMode::Sf);
    let opts = LoadOptions {
        channels: cfg.model.in_channels,
        size: Some(cfg.model.input_size as u32),
    };
    let ds = load_folder_dataset(dataset, opts)?;
    if ds.k() != cfg.model.k {
        return Err(CliError::Usage(format!(
            "dataset has K = {} but the checkpoint was trained with K = {}",
            ds.k(),
            cfg.model.k
        )));
    }
    let pool: Vec<usize> = (0..ds.len()).collect();
    let (outcomes, images) = fuse_pairs(
        &state.model,
        &cfg,
        &ds,
        &pool,
        n_pairs,
        seed.unwrap_or(cfg.train.seed),
        mode,
    )?;
    fs::create_dir_all(out).map_err(|e| runtime(out, e))?;
    for (o, img) in outcomes.iter().zip(&images) {
        img.save_png(&out.join(format!("{}_to_{}.png", o.main_id, o.ref_label)))?;
    }
    let summary = PairSummary::of(&outcomes);
    #[derive(Serialize)]
    struct Index<'a> {
        summary: &'a PairSummary,
        pairs: &'a [PairOutcome],
    }
    write_json(
        &out.join("index.json"),
        &Index {
            summary: &summary,
            pairs: &outcomes,
        },
    )?;
    Ok(summary)
}

/// Averages per-fold validation reports of independent runs over the first
/// `max_folds` folds of a fixed split.
pub fn fold_averaged(
    cfg: &Config,
    ds: &OrdinalDataset,
    folds: &[cig_core::data::Fold],
) -> CliResult<cig_core::evaluation::CrossValidatedReport> {
    let mut reports = Vec::with_capacity(folds.len());
    for fold in folds {
        let outcome = cig_core::training::run_training(cfg, ds, fold, None)?;
        reports.push(outcome.report);
    }
    Ok(average_reports(&reports, cfg.eval.gap_threshold)?)
}

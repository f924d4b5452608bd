//! Experiment configuration, as read from and written to JSON.
//!
//! Every section has defaults, so `{}` is a valid config. [`Config::resolve`]
//! fills derived fields and validates; the resolved form is what runs record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Arch, BackboneConfig};
use crate::data::{hex, SyntheticSpec};
use crate::error::{CigError, Result};
use crate::fusion::{split_channels, GeneratorKind};
use crate::losses::{LossWeights, Reduction, SsimParams};
use crate::sampler::SamplerKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub spec: SyntheticSpec,
    pub n_total: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Folder-layout dataset root.
    pub root: Option<PathBuf>,
    /// Generate the dataset in memory instead of loading it.
    pub synthetic: Option<SyntheticSource>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfConfig {
    pub tau: f64,
}

impl Default for SfConfig {
    fn default() -> Self {
        SfConfig { tau: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Defaults to `unet` for the CNN encoder and `light_decoder` for the transformer.
    pub kind: Option<GeneratorKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Separation-fusion of categorical and structural blocks.
    Sf,
    /// Direct addition of the two feature maps.
    Add,
}

impl std::str::FromStr for FusionMode {
    type Err = CigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sf" => Ok(FusionMode::Sf),
            "add" => Ok(FusionMode::Add),
            other => Err(CigError::invalid("fusion.mode", format!("unknown mode `{other}` (sf, add)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// When set, overrides `train.enable_sf`.
    pub mode: Option<FusionMode>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub ssim_epsilon: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            alpha: w.alpha,
            beta: w.beta,
            lambda: w.lambda,
            ssim_epsilon: SsimParams::default().epsilon,
            reduction: Reduction::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_generator: f64,
    /// Batches in the joint phase.
    pub joint_steps: u64,
    /// Batches in the continued phase (only when `enable_ct`).
    pub continued_training_batches: u64,
    pub enable_ig: bool,
    pub enable_sf: bool,
    pub enable_ct: bool,
    pub seed: u64,
    /// Validate every this many steps (0: only at the end).
    pub eval_every: u64,
    /// Emit a trace record every this many steps.
    pub log_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 18,
            lr_encoder: 1e-4,
            lr_generator: 5e-3,
            joint_steps: 2000,
            continued_training_batches: 200,
            enable_ig: true,
            enable_sf: true,
            enable_ct: true,
            seed: 0,
            eval_every: 0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_folds: usize,
    /// Fold used for validation by a single training run.
    pub fold: usize,
    /// Accuracy gap (percentage points) below the best category that marks a minority.
    pub gap_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_folds: 5,
            fold: 0,
            gap_threshold: 20.0,
        }
    }
}

fn default_model() -> BackboneConfig {
    BackboneConfig {
        arch: Arch::SmallCnn,
        channels: 32,
        input_size: 32,
        in_channels: 1,
        k: 5,
        heads: 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_model")]
    pub model: BackboneConfig,
    #[serde(default)]
    pub sf: SfConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: DataConfig::default(),
            model: default_model(),
            sf: SfConfig::default(),
            generator: GeneratorConfig::default(),
            fusion: FusionConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Rows of the component ablation: image generation, separation-fusion,
/// continued training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Plain cross-entropy training.
    Base,
    /// Generation from directly added feature maps.
    Ig,
    /// Generation with separation-fusion, no continued phase.
    IgSf,
    /// Everything enabled.
    Full,
}

impl std::str::FromStr for Ablation {
    type Err = CigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Ablation::Base),
            "ig" => Ok(Ablation::Ig),
            "ig_sf" => Ok(Ablation::IgSf),
            "full" => Ok(Ablation::Full),
            other => Err(CigError::invalid(
                "ablation",
                format!("unknown preset `{other}` (base, ig, ig_sf, full)"),
            )),
        }
    }
}

impl Ablation {
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::Base => (false, false, false),
            Ablation::Ig => (true, false, false),
            Ablation::IgSf => (true, true, false),
            Ablation::Full => (true, true, true),
        }
    }
}

impl Config {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CigError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        let (ig, sf, ct) = ablation.flags();
        self.train.enable_ig = ig;
        self.train.enable_sf = sf;
        self.train.enable_ct = ct;
        self.fusion.mode = None;
    }

    /// Fills derived fields and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(mode) = self.fusion.mode {
            self.train.enable_sf = mode == FusionMode::Sf;
        }
        self.fusion.mode = Some(if self.train.enable_sf {
            FusionMode::Sf
        } else {
            FusionMode::Add
        });
        if self.generator.kind.is_none() {
            self.generator.kind = Some(match self.model.arch {
                Arch::SmallCnn => GeneratorKind::Unet,
                Arch::SmallTransformer => GeneratorKind::LightDecoder,
            });
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        split_channels(self.model.channels, self.sf.tau)?;
        self.loss_weights().validate()?;
        self.ssim_params().validate()?;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(CigError::invalid("train.batch_size", "must be at least 2"));
        }
        if !(t.lr_encoder > 0.0 && t.lr_encoder.is_finite()) {
            return Err(CigError::invalid("train.lr_encoder", "must be positive"));
        }
        if !(t.lr_generator > 0.0 && t.lr_generator.is_finite()) {
            return Err(CigError::invalid("train.lr_generator", "must be positive"));
        }
        if t.enable_sf && !t.enable_ig {
            return Err(CigError::invalid("train.enable_sf", "separation-fusion requires enable_ig"));
        }
        if t.log_every == 0 {
            return Err(CigError::invalid("train.log_every", "must be at least 1"));
        }
        if self.eval.n_folds < 2 {
            return Err(CigError::invalid("eval.n_folds", "must be at least 2"));
        }
        if self.eval.fold >= self.eval.n_folds {
            return Err(CigError::invalid("eval.fold", "must be below eval.n_folds"));
        }
        if self.eval.gap_threshold.is_nan() || self.eval.gap_threshold < 0.0 {
            return Err(CigError::invalid("eval.gap_threshold", "must be >= 0"));
        }
        if let Some(src) = &self.data.synthetic {
            src.spec.validate()?;
            if src.spec.k != self.model.k {
                return Err(CigError::ConfigMismatch(format!(
                    "synthetic K = {} but model.K = {}",
                    src.spec.k, self.model.k
                )));
            }
            if src.spec.image_size != self.model.input_size {
                return Err(CigError::ConfigMismatch(format!(
                    "synthetic image_size = {} but model.input_size = {}",
                    src.spec.image_size, self.model.input_size
                )));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            lambda: self.loss.lambda,
        }
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams {
            dynamic_range: 1.0,
            epsilon: self.loss.ssim_epsilon,
        }
    }

    pub fn generator_kind(&self) -> GeneratorKind {
        self.generator.kind.unwrap_or_default()
    }

    /// Git-style content hash: SHA-256 over `blob <len>\0<canonical json>`.
    pub fn content_hash(&self) -> Result<String> {
        let body = serde_json::to_vec(self)?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(&body);
        Ok(hex(&h.finalize()))
    }

    /// Model-shaping fields that a checkpoint must agree with.
    pub fn check_compatible(&self, other: &Config) -> Result<()> {
        let (a, b) = (&self.model, &other.model);
        let checks = [
            ("K", a.k.to_string(), b.k.to_string()),
            ("C", a.channels.to_string(), b.channels.to_string()),
            ("input_size", a.input_size.to_string(), b.input_size.to_string()),
            ("in_channels", a.in_channels.to_string(), b.in_channels.to_string()),
            ("arch", format!("{:?}", a.arch), format!("{:?}", b.arch)),
            ("heads", a.heads.to_string(), b.heads.to_string()),
            ("sf.tau", self.sf.tau.to_string(), other.sf.tau.to_string()),
            (
                "generator.kind",
                format!("{:?}", self.generator_kind()),
                format!("{:?}", other.generator_kind()),
            ),
        ];
        for (field, x, y) in checks {
            if x != y {
                return Err(CigError::ConfigMismatch(format!("{field} is {x} in the checkpoint but {y} in the config")));
            }
        }
        Ok(())
    }
}

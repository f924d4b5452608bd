//! The two-optimizer training loop: joint generation + classification,
//! followed by an optional classification-only phase.
//!
//! Both losses of a joint step are summed and differentiated once. The
//! generation loss sees the encoder and classifier only through detached
//! copies, and the classification loss sees the fusion images only as
//! detached data, so the gradients of the sum split exactly: encoder-side
//! parameters receive the classification gradient and generation-side
//! parameters receive the generation gradient.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Classifier, Encoder};
use crate::checkpoint::{load_checkpoint_for, save_checkpoint};
use crate::config::{Config, FusionMode};
use crate::data::{Fold, OrdinalDataset};
use crate::error::{CigError, Result};
use crate::evaluation::{per_category_metrics, PerCategoryReport, PredictionRecord};
use crate::fusion::{direct_add_fusion, fuse, split_channels, Extractors, FusedFeatures, Generator};
use crate::losses::{
    categorical_generation_loss, cross_entropy, reconstruction_loss, scalar, structural_generation_loss, LossBundle,
};
use crate::nn::{device, Init, ParamGroup, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::ReferenceSampler;

const INIT_STREAM: u64 = 0;
const SAMPLER_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 1 << 32;
const EVAL_CHUNK: usize = 64;

/// Stacks dataset images into a `(N, C, H, W)` tensor.
pub fn batch_tensor(ds: &OrdinalDataset, indices: &[usize]) -> Result<Tensor> {
    let (c, h, w) = ds.image_shape().ok_or(CigError::EmptyInput("dataset"))?;
    let mut data = Vec::with_capacity(indices.len() * c * h * w);
    for &i in indices {
        data.extend_from_slice(ds.sample(i).image.pixels());
    }
    Ok(Tensor::from_vec(data, (indices.len(), c, h, w), &device())?)
}

/// Encoder, classifier, separation extractors and generator, with their
/// parameters registered in one store.
#[derive(Debug)]
pub struct CigModel {
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub extractors: Extractors,
    pub generator: Generator,
    params: ParamStore,
}

impl CigModel {
    /// Freshly initialised model, seeded by `cfg.train.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(INIT_STREAM);
        let (encoder, classifier) = {
            let mut init = Init::new(&mut params, &mut rng, ParamGroup::Encoder);
            (
                Encoder::new(&cfg.model, &mut init)?,
                Classifier::new(&cfg.model, &mut init)?,
            )
        };
        let split = split_channels(cfg.model.channels, cfg.sf.tau)?;
        let (extractors, generator) = {
            let mut init = Init::new(&mut params, &mut rng, ParamGroup::Generation);
            (
                Extractors::new(cfg.model.channels, split, &mut init)?,
                Generator::new(cfg.generator_kind(), &cfg.model, &mut init)?,
            )
        };
        Ok(CigModel {
            encoder,
            classifier,
            extractors,
            generator,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(B, K)` logits, with gradients tracked.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.classifier.classify(self.encoder.encode(images)?.last())
    }

    /// Predicted 1-based labels, computed without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<u32>> {
        let enc = self.encoder.detached();
        let cls = self.classifier.detached();
        let n = images.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(n - start);
            let logits = cls.classify(enc.encode(&images.narrow(0, start, len)?)?.last())?;
            let idx: Vec<u32> = logits.argmax(1)?.to_vec1()?;
            out.extend(idx.into_iter().map(|i| i + 1));
        }
        Ok(out)
    }

    pub fn evaluate(&self, ds: &OrdinalDataset, indices: &[usize]) -> Result<Vec<PredictionRecord>> {
        let mut records = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let preds = self.predict(&batch_tensor(ds, chunk)?)?;
            records.extend(
                chunk
                    .iter()
                    .zip(preds)
                    .map(|(&i, p)| PredictionRecord::new(ds.sample(i).label, p)),
            );
        }
        Ok(records)
    }

    /// Generates fusion images for paired main/reference batches without
    /// gradient tracking.
    pub fn fuse_images(&self, x_m: &Tensor, x_r: &Tensor, mode: FusionMode) -> Result<Tensor> {
        let enc = self.encoder.detached();
        let pyr_m = enc.encode(x_m)?;
        let pyr_r = enc.encode(x_r)?;
        let fused = match mode {
            FusionMode::Sf => {
                let ex = self.extractors.detached();
                fuse(&ex.separate(pyr_m.last())?, &ex.separate(pyr_r.last())?)?
            }
            FusionMode::Add => direct_add_fusion(pyr_m.last(), pyr_r.last())?,
        };
        self.generator.detached().generate(&fused, Some(&pyr_m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Joint,
    Continued,
}

/// Everything needed to continue a run exactly.
#[derive(Debug)]
pub struct TrainState {
    pub model: CigModel,
    pub encoder_opt: Adam,
    pub generation_opt: Adam,
    /// Batches completed across both phases.
    pub step: u64,
    pub phase: Phase,
    /// Reference-sampling stream.
    pub rng: ChaCha8Rng,
    pub sampler: ReferenceSampler,
}

impl TrainState {
    pub fn new(cfg: &Config, ds: &OrdinalDataset, train: &[usize]) -> Result<Self> {
        let model = CigModel::new(cfg)?;
        let encoder_opt = Adam::new(
            AdamConfig::with_lr(cfg.train.lr_encoder),
            &model.params.group(ParamGroup::Encoder),
        );
        let generation_opt = Adam::new(
            AdamConfig::with_lr(cfg.train.lr_generator),
            &model.params.group(ParamGroup::Generation),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(TrainState {
            model,
            encoder_opt,
            generation_opt,
            step: 0,
            phase: Phase::Joint,
            rng,
            sampler: ReferenceSampler::new(cfg.sampler.kind, ds, train),
        })
    }
}

/// One line of the metric trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: Phase,
    pub l_sg: f64,
    pub l_cg: f64,
    pub l_rc: f64,
    pub l_g: f64,
    pub l_ce_main: f64,
    pub l_ce_fusion: f64,
    pub l_c: f64,
    pub val_acc: Option<f64>,
    pub val_mae: Option<f64>,
}

impl MetricRecord {
    fn new(step: u64, phase: Phase, b: &LossBundle) -> Self {
        MetricRecord {
            step,
            phase,
            l_sg: b.l_sg,
            l_cg: b.l_cg,
            l_rc: b.l_rc,
            l_g: b.l_g,
            l_ce_main: b.l_ce_main,
            l_ce_fusion: b.l_ce_fusion,
            l_c: b.l_c,
            val_acc: None,
            val_mae: None,
        }
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub trace: Vec<MetricRecord>,
    /// Final validation report with minority flags set.
    pub report: PerCategoryReport,
}

/// Drives a run over one fold of a dataset.
pub struct Trainer<'a> {
    cfg: &'a Config,
    ds: &'a OrdinalDataset,
    train: Vec<usize>,
    validation: Vec<usize>,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a Config, ds: &'a OrdinalDataset, fold: &Fold) -> Result<Self> {
        cfg.validate()?;
        if ds.k() != cfg.model.k {
            return Err(CigError::ConfigMismatch(format!(
                "dataset has K = {} but model.K = {}",
                ds.k(),
                cfg.model.k
            )));
        }
        let expected = (cfg.model.in_channels, cfg.model.input_size, cfg.model.input_size);
        match ds.image_shape() {
            Some(shape) if shape == expected => {}
            Some(shape) => {
                return Err(CigError::ConfigMismatch(format!(
                    "dataset images are {shape:?} but the model expects {expected:?}"
                )))
            }
            None => return Err(CigError::EmptyInput("dataset")),
        }
        if fold.train.is_empty() {
            return Err(CigError::EmptyInput("training split"));
        }
        Ok(Trainer {
            cfg,
            ds,
            train: fold.train.clone(),
            validation: fold.validation.clone(),
            checkpoint_dir: None,
        })
    }

    /// Checkpoints are written to `<dir>/ckpt_<step>`.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        TrainState::new(self.cfg, self.ds, &self.train)
    }

    pub fn joint_steps(&self) -> u64 {
        self.cfg.train.joint_steps
    }

    pub fn total_steps(&self) -> u64 {
        let ct = if self.cfg.train.enable_ct {
            self.cfg.train.continued_training_batches
        } else {
            0
        };
        self.cfg.train.joint_steps + ct
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.train.len() / self.cfg.train.batch_size).max(1) as u64
    }

    /// Main-image indices of batch `step`. Each epoch is a fresh
    /// permutation derived from the seed and the epoch number.
    pub fn batch_for(&self, step: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let epoch = step / per_epoch;
        let pos = (step % per_epoch) as usize;
        let mut order = self.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        rng.set_stream(EPOCH_STREAM_BASE + epoch);
        order.shuffle(&mut rng);
        let b = self.cfg.train.batch_size.min(order.len());
        order[pos * b..(pos + 1) * b].to_vec()
    }

    fn labels(&self, batch: &[usize]) -> Vec<u32> {
        batch.iter().map(|&i| self.ds.sample(i).label).collect()
    }

    /// Main-image cross-entropy step on the encoder and classifier only.
    pub fn classification_step(&self, state: &mut TrainState, batch: &[usize]) -> Result<LossBundle> {
        let x_m = batch_tensor(self.ds, batch)?;
        let ce = cross_entropy(&state.model.logits(&x_m)?, &self.labels(batch))?;
        let grads = ce.backward()?;
        state
            .encoder_opt
            .step(&state.model.params.group(ParamGroup::Encoder), &grads)?;
        Ok(LossBundle::assemble(
            0.0,
            0.0,
            0.0,
            scalar(&ce)?,
            0.0,
            &self.cfg.loss_weights(),
        ))
    }

    /// One joint step: generation from adjacent-category references, then
    /// both optimizers step on their own loss.
    pub fn joint_step(&self, state: &mut TrainState, batch: &[usize]) -> Result<LossBundle> {
        if !self.cfg.train.enable_ig {
            return self.classification_step(state, batch);
        }
        let cfg = self.cfg;
        let w = cfg.loss_weights();
        let ssim = cfg.ssim_params();
        let reduction = cfg.loss.reduction;
        let labels = self.labels(batch);

        let mut rows = Vec::with_capacity(batch.len());
        let mut refs = Vec::with_capacity(batch.len());
        for (row, &m) in labels.iter().enumerate() {
            match state.sampler.draw(m, &mut state.rng) {
                Ok(r) => {
                    rows.push(row as u32);
                    refs.push(r);
                }
                Err(CigError::NoReferenceAvailable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if refs.is_empty() {
            return self.classification_step(state, batch);
        }

        let model = &state.model;
        let x_m = batch_tensor(self.ds, batch)?;
        let pyr_m = model.encoder.encode(&x_m)?;
        let ce_main = cross_entropy(&model.classifier.classify(pyr_m.last())?, &labels)?;

        // Generation side: encoder and classifier act as fixed functions.
        let enc_fixed = model.encoder.detached();
        let cls_fixed = model.classifier.detached();
        let rows = Tensor::new(rows.as_slice(), &device())?;
        let x_main = x_m.index_select(&rows, 0)?;
        let pyr_main = pyr_m.detach().select(&rows)?;
        let x_r = batch_tensor(self.ds, &refs)?;
        let ref_labels = self.labels(&refs);
        let pyr_r = enc_fixed.encode(&x_r)?;
        let p_r = cls_fixed.classify(pyr_r.last())?;
        let (fused, l_rc): (FusedFeatures, Option<Tensor>) = if cfg.train.enable_sf {
            let sep_m = model.extractors.separate(pyr_main.last())?;
            let sep_r = model.extractors.separate(pyr_r.last())?;
            let l_rc = reconstruction_loss(pyr_main.last(), &sep_m, reduction)?;
            (fuse(&sep_m, &sep_r)?, Some(l_rc))
        } else {
            (direct_add_fusion(pyr_main.last(), pyr_r.last())?, None)
        };
        let x_f = model.generator.generate(&fused, Some(&pyr_main))?;
        let p_f = cls_fixed.classify(enc_fixed.encode(&x_f)?.last())?;
        let l_sg = structural_generation_loss(&x_main, &x_r, &x_f, &ssim)?;
        let l_cg = categorical_generation_loss(&p_r, &p_f, reduction)?;
        let mut l_g = (l_sg.affine(w.alpha, 0.0)? + l_cg.affine(w.beta, 0.0)?)?;
        if let Some(l_rc) = &l_rc {
            l_g = (l_g + l_rc)?;
        }

        // Classification side: fusion images are extra training data.
        let logits_f = model.logits(&x_f.detach())?;
        let ce_fusion = cross_entropy(&logits_f, &ref_labels)?;
        let l_c = (&ce_main + ce_fusion.affine(w.lambda, 0.0)?)?;

        let grads = (&l_g + &l_c)?.backward()?;
        let l_rc_value = match &l_rc {
            Some(t) => scalar(t)?,
            None => 0.0,
        };
        let bundle = LossBundle::assemble(
            scalar(&l_sg)?,
            scalar(&l_cg)?,
            l_rc_value,
            scalar(&ce_main)?,
            scalar(&ce_fusion)?,
            &w,
        );
        state
            .encoder_opt
            .step(&state.model.params.group(ParamGroup::Encoder), &grads)?;
        state
            .generation_opt
            .step(&state.model.params.group(ParamGroup::Generation), &grads)?;
        Ok(bundle)
    }

    /// Runs the batch for `state.step` in the appropriate phase and advances the counter.
    pub fn step(&self, state: &mut TrainState) -> Result<LossBundle> {
        state.phase = if state.step < self.joint_steps() {
            Phase::Joint
        } else {
            Phase::Continued
        };
        let batch = self.batch_for(state.step);
        let bundle = match state.phase {
            Phase::Joint => self.joint_step(state, &batch)?,
            Phase::Continued => self.classification_step(state, &batch)?,
        };
        state.step += 1;
        Ok(bundle)
    }

    pub fn validate(&self, model: &CigModel) -> Result<PerCategoryReport> {
        let records = model.evaluate(self.ds, &self.validation)?;
        let mut report = per_category_metrics(&records, self.ds.k())?;
        report.flag_minorities(self.cfg.eval.gap_threshold);
        Ok(report)
    }

    fn checkpoint(&self, state: &TrainState) -> Result<Option<PathBuf>> {
        match &self.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("ckpt_{}", state.step));
                save_checkpoint(state, self.cfg, &path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }

    /// Trains from `state` to the end of the configured budget, calling
    /// `on_record` for every trace line. A failing step flushes a checkpoint
    /// before the error is returned.
    pub fn run(
        &self,
        mut state: TrainState,
        mut on_record: impl FnMut(&MetricRecord) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let total = self.total_steps();
        let eval_every = match self.cfg.train.eval_every {
            0 => self.batches_per_epoch(),
            n => n,
        };
        let mut trace = Vec::new();
        while state.step < total {
            let bundle = match self.step(&mut state) {
                Ok(b) => b,
                Err(e) => {
                    // Parameters are only written after both losses succeed,
                    // so the state still holds the last completed step.
                    if let Err(ce) = self.checkpoint(&state) {
                        log::error!("checkpoint flush failed: {ce}");
                    }
                    return Err(e);
                }
            };
            let step = state.step;
            let mut record = MetricRecord::new(step, state.phase, &bundle);
            let do_eval = step.is_multiple_of(eval_every) || step == total;
            if do_eval && !self.validation.is_empty() {
                let report = self.validate(&state.model)?;
                record.val_acc = Some(report.overall.acc);
                record.val_mae = Some(report.overall.mae);
                log::info!(
                    "step {step}/{total}: l_c {:.4} l_g {:.4} val_acc {:.2}",
                    bundle.l_c,
                    bundle.l_g,
                    report.overall.acc
                );
            }
            if do_eval || step.is_multiple_of(self.cfg.train.log_every) {
                on_record(&record)?;
                trace.push(record);
            }
            let every = self.cfg.train.checkpoint_every;
            if every > 0 && step.is_multiple_of(every) && step != total {
                self.checkpoint(&state)?;
            }
        }
        self.checkpoint(&state)?;
        let report = self.validate(&state.model)?;
        Ok(TrainOutcome { state, trace, report })
    }
}

/// Trains a fresh model on `fold`.
pub fn run_training(
    cfg: &Config,
    ds: &OrdinalDataset,
    fold: &Fold,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, ds, fold)?;
    if let Some(dir) = checkpoint_dir {
        trainer = trainer.with_checkpoint_dir(dir);
    }
    let state = trainer.initial_state()?;
    trainer.run(state, |_| Ok(()))
}

/// Continues a run from a checkpoint written with a compatible config.
pub fn resume_training(
    cfg: &Config,
    ds: &OrdinalDataset,
    fold: &Fold,
    checkpoint: &Path,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, ds, fold)?;
    if let Some(dir) = checkpoint_dir {
        trainer = trainer.with_checkpoint_dir(dir);
    }
    let state = load_checkpoint_for(checkpoint, cfg)?;
    trainer.run(state, |_| Ok(()))
}

//! Binary checkpoints of a [`TrainState`].
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then all tensors as little-endian `f64`. The header carries the
//! config, counters, rng position, sampler decks, a tensor index and the
//! SHA-256 of the tensor blob.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::data::hex;
use crate::error::{CigError, Result};
use crate::nn::ParamGroup;
use crate::optim::{Adam, AdamConfig, MomentState};
use crate::sampler::ReferenceSampler;
use crate::training::{CigModel, Phase, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CIGCKPT\0";
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct RngSnapshot {
    seed: String,
    stream: u64,
    // u128 does not fit JSON numbers losslessly.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    steps: Vec<(String, u64)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    step: u64,
    phase: Phase,
    rng: RngSnapshot,
    sampler: ReferenceSampler,
    encoder_opt: OptimizerHeader,
    generation_opt: OptimizerHeader,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

struct BlobWriter {
    blob: Vec<u8>,
    index: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: String, values: &[f64]) {
        self.index.push(TensorEntry {
            name,
            offset: self.blob.len() / 8,
            len: values.len(),
        });
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn optimizer_header(opt: &Adam, prefix: &str, blob: &mut BlobWriter) -> OptimizerHeader {
    for st in opt.state() {
        blob.push(format!("{prefix}.m/{}", st.name), &st.m);
        blob.push(format!("{prefix}.v/{}", st.name), &st.v);
    }
    OptimizerHeader {
        config: opt.config(),
        steps: opt.state().iter().map(|s| (s.name.clone(), s.steps)).collect(),
    }
}

/// Writes `state` to `path` atomically (via a temporary sibling file).
pub fn save_checkpoint(state: &TrainState, cfg: &Config, path: &Path) -> Result<()> {
    let mut blob = BlobWriter {
        blob: Vec::new(),
        index: Vec::new(),
    };
    for (name, values) in state.model.params().values()? {
        blob.push(format!("param/{name}"), &values);
    }
    let encoder_opt = optimizer_header(&state.encoder_opt, "adam.encoder", &mut blob);
    let generation_opt = optimizer_header(&state.generation_opt, "adam.generation", &mut blob);
    let header = Header {
        config: cfg.clone(),
        step: state.step,
        phase: state.phase,
        rng: RngSnapshot {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        sampler: state.sampler.clone(),
        encoder_opt,
        generation_opt,
        tensors: blob.index,
        blob_sha256: hex(&Sha256::digest(&blob.blob)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + blob.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob.blob);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CigError::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &out).map_err(|e| CigError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CigError::io(path, e))?;
    Ok(())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> CigError {
    CigError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_seed(path: &Path, s: &str) -> Result<[u8; 32]> {
    let mut seed = [0u8; 32];
    if s.len() != 64 {
        return Err(corrupt(path, "bad rng seed"));
    }
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| corrupt(path, "bad rng seed"))?;
    }
    Ok(seed)
}

struct Blob<'a> {
    path: &'a Path,
    data: &'a [u8],
    index: Vec<TensorEntry>,
}

impl Blob<'_> {
    fn take(&self, name: &str) -> Result<Vec<f64>> {
        let e = self
            .index
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| corrupt(self.path, format!("missing tensor `{name}`")))?;
        let bytes = self
            .data
            .get(e.offset * 8..(e.offset + e.len) * 8)
            .ok_or_else(|| corrupt(self.path, format!("tensor `{name}` out of bounds")))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn optimizer(&self, h: &OptimizerHeader, prefix: &str) -> Result<Adam> {
        let state = h
            .steps
            .iter()
            .map(|(name, steps)| {
                Ok(MomentState {
                    name: name.clone(),
                    steps: *steps,
                    m: self.take(&format!("{prefix}.m/{name}"))?,
                    v: self.take(&format!("{prefix}.v/{name}"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Adam::from_state(h.config, state))
    }
}

/// Reads a checkpoint, returning the config it was written with and the
/// restored state.
pub fn load_checkpoint(path: &Path) -> Result<(Config, TrainState)> {
    let bytes = fs::read(path).map_err(|e| CigError::io(path, e))?;
    if bytes.len() < PREFIX_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CigError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| corrupt(path, format!("unreadable header: {e}")))?;
    let data = &bytes[header_end..];
    if hex(&Sha256::digest(data)) != header.blob_sha256 {
        return Err(corrupt(path, "tensor data checksum mismatch"));
    }
    let blob = Blob {
        path,
        data,
        index: header.tensors,
    };

    let cfg = header.config;
    let model = CigModel::new(&cfg)?;
    let expected = model.params().len();
    let stored = blob.index.iter().filter(|e| e.name.starts_with("param/")).count();
    if stored != expected {
        return Err(CigError::ConfigMismatch(format!(
            "checkpoint stores {stored} parameters, model has {expected}"
        )));
    }
    for p in model.params().iter() {
        model.params().set_values(&p.name, blob.take(&format!("param/{}", p.name))?)?;
    }
    let encoder_opt = blob.optimizer(&header.encoder_opt, "adam.encoder")?;
    let generation_opt = blob.optimizer(&header.generation_opt, "adam.generation")?;
    for (opt, group) in [(&encoder_opt, ParamGroup::Encoder), (&generation_opt, ParamGroup::Generation)] {
        let names: Vec<&str> = model.params().group(group).iter().map(|p| p.name.as_str()).collect();
        let stored: Vec<&str> = opt.state().iter().map(|s| s.name.as_str()).collect();
        if names != stored {
            return Err(corrupt(path, format!("{group:?} optimizer does not match the model")));
        }
    }

    let mut rng = ChaCha8Rng::from_seed(parse_seed(path, &header.rng.seed)?);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(
        header
            .rng
            .word_pos
            .parse()
            .map_err(|_| corrupt(path, "bad rng position"))?,
    );
    let state = TrainState {
        model,
        encoder_opt,
        generation_opt,
        step: header.step,
        phase: header.phase,
        rng,
        sampler: header.sampler,
    };
    Ok((cfg, state))
}

/// Loads a checkpoint for use with `cfg`, rejecting model-shape differences.
pub fn load_checkpoint_for(path: &Path, cfg: &Config) -> Result<TrainState> {
    let (stored, state) = load_checkpoint(path)?;
    stored.check_compatible(cfg)?;
    Ok(state)
}

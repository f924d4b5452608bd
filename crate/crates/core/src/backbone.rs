//! Image encoders producing a four-stage feature pyramid, and the
//! single-layer classification head.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CigError, Result};
use crate::nn::{self, Conv2d, Init, Linear, TransformerBlock};

pub const STAGES: usize = 4;
/// Total downsampling from input to the last stage.
pub const STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    SmallCnn,
    SmallTransformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    #[serde(default)]
    pub arch: Arch,
    /// Channel count of the last stage.
    #[serde(rename = "C")]
    pub channels: usize,
    /// Side length of the square input images.
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Upper bound on attention heads (transformer encoder and light decoder).
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_in_channels() -> usize {
    1
}

fn default_heads() -> usize {
    2
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(CigError::invalid("model.K", "at least two categories are required"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(STRIDE) {
            return Err(CigError::invalid(
                "model.input_size",
                format!("{} is not a positive multiple of {STRIDE}", self.input_size),
            ));
        }
        if self.channels < 8 {
            return Err(CigError::invalid("model.C", "must be at least 8"));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(CigError::invalid("model.in_channels", "must be 1 or 3"));
        }
        if self.heads == 0 {
            return Err(CigError::invalid("model.heads", "must be at least 1"));
        }
        Ok(())
    }

    /// Channel widths of the four stages, halving backwards from `C`.
    pub fn stage_channels(&self) -> [usize; STAGES] {
        let c = self.channels;
        [(c / 8).max(1), (c / 4).max(1), (c / 2).max(1), c]
    }

    /// Spatial side length of each stage.
    pub fn stage_sizes(&self) -> [usize; STAGES] {
        let s = self.input_size;
        [s / 2, s / 4, s / 8, s / 16]
    }
}

/// Encoder outputs `F^(1)..F^(4)`, each `(B, C_i, H_i, W_i)`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: [Tensor; STAGES],
}

impl FeaturePyramid {
    pub fn last(&self) -> &Tensor {
        &self.stages[STAGES - 1]
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.stages[0].dim(0)?)
    }

    pub fn detach(&self) -> Self {
        FeaturePyramid {
            stages: self.stages.clone().map(|t| t.detach()),
        }
    }

    /// Keeps only the batch rows listed in `rows`.
    pub fn select(&self, rows: &Tensor) -> Result<Self> {
        let mut stages = self.stages.clone();
        for s in stages.iter_mut() {
            *s = s.index_select(rows, 0)?;
        }
        Ok(FeaturePyramid { stages })
    }
}

#[derive(Clone, Debug)]
struct CnnStage {
    down: Conv2d,
    refine: Conv2d,
}

/// Four conv stages, each a stride-2 3×3 convolution followed by a 3×3
/// convolution, with SiLU activations.
#[derive(Clone, Debug)]
pub struct SmallCnn {
    stages: Vec<CnnStage>,
}

impl SmallCnn {
    fn new(cfg: &BackboneConfig, init: &mut Init) -> Result<Self> {
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::with_capacity(STAGES);
        for (i, c_out) in cfg.stage_channels().into_iter().enumerate() {
            stages.push(CnnStage {
                down: Conv2d::new(init, &format!("encoder.stage{i}.down"), c_in, c_out, 3, 2, 1)?,
                refine: Conv2d::new(init, &format!("encoder.stage{i}.refine"), c_out, c_out, 3, 1, 1)?,
            });
            c_in = c_out;
        }
        Ok(SmallCnn { stages })
    }

    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut outs = Vec::with_capacity(STAGES);
        let mut h = x.clone();
        for st in &self.stages {
            h = st.down.forward(&h)?.silu()?;
            h = st.refine.forward(&h)?.silu()?;
            outs.push(h.clone());
        }
        Ok(FeaturePyramid {
            stages: outs.try_into().expect("four stages"),
        })
    }

    fn detached(&self) -> Self {
        SmallCnn {
            stages: self
                .stages
                .iter()
                .map(|s| CnnStage {
                    down: s.down.detached(),
                    refine: s.refine.detached(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct TransformerStage {
    merge: Conv2d,
    block: TransformerBlock,
}

/// Pyramid transformer: each stage merges 2×2 patches (a stride-2 2×2
/// convolution) and runs one attention block over the resulting tokens.
#[derive(Clone, Debug)]
pub struct SmallTransformer {
    stages: Vec<TransformerStage>,
}

impl SmallTransformer {
    fn new(cfg: &BackboneConfig, init: &mut Init) -> Result<Self> {
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::with_capacity(STAGES);
        for (i, c_out) in cfg.stage_channels().into_iter().enumerate() {
            let heads = nn::heads_for(c_out, cfg.heads);
            stages.push(TransformerStage {
                merge: Conv2d::new(init, &format!("encoder.stage{i}.merge"), c_in, c_out, 2, 2, 0)?,
                block: TransformerBlock::new(init, &format!("encoder.stage{i}.block"), c_out, heads)?,
            });
            c_in = c_out;
        }
        Ok(SmallTransformer { stages })
    }

    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut outs = Vec::with_capacity(STAGES);
        let mut h = x.clone();
        for st in &self.stages {
            let merged = st.merge.forward(&h)?;
            let (_, _, hh, ww) = merged.dims4()?;
            let tokens = st.block.forward(&nn::to_tokens(&merged)?)?;
            h = nn::from_tokens(&tokens, hh, ww)?;
            outs.push(h.clone());
        }
        Ok(FeaturePyramid {
            stages: outs.try_into().expect("four stages"),
        })
    }

    fn detached(&self) -> Self {
        SmallTransformer {
            stages: self
                .stages
                .iter()
                .map(|s| TransformerStage {
                    merge: s.merge.detached(),
                    block: s.block.detached(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum EncoderNet {
    Cnn(SmallCnn),
    Transformer(SmallTransformer),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: BackboneConfig,
    net: EncoderNet,
}

impl Encoder {
    pub fn new(cfg: &BackboneConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let net = match cfg.arch {
            Arch::SmallCnn => EncoderNet::Cnn(SmallCnn::new(cfg, init)?),
            Arch::SmallTransformer => EncoderNet::Transformer(SmallTransformer::new(cfg, init)?),
        };
        Ok(Encoder { cfg: cfg.clone(), net })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Encodes a `(B, in_channels, S, S)` batch.
    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let dims = images.dims();
        let s = self.cfg.input_size;
        if dims.len() != 4 || dims[1] != self.cfg.in_channels || dims[2] != s || dims[3] != s {
            return Err(CigError::shape(
                "encoder input",
                format!("(B, {}, {s}, {s})", self.cfg.in_channels),
                format!("{dims:?}"),
            ));
        }
        match &self.net {
            EncoderNet::Cnn(n) => n.forward(images),
            EncoderNet::Transformer(n) => n.forward(images),
        }
    }

    pub fn detached(&self) -> Self {
        let net = match &self.net {
            EncoderNet::Cnn(n) => EncoderNet::Cnn(n.detached()),
            EncoderNet::Transformer(n) => EncoderNet::Transformer(n.detached()),
        };
        Encoder {
            cfg: self.cfg.clone(),
            net,
        }
    }
}

/// Global average pooling followed by one fully-connected layer. The output
/// is raw (pre-softmax) scores.
#[derive(Clone, Debug)]
pub struct Classifier {
    fc: Linear,
}

impl Classifier {
    pub fn new(cfg: &BackboneConfig, init: &mut Init) -> Result<Self> {
        Ok(Classifier {
            fc: Linear::new(init, "classifier.fc", cfg.channels, cfg.k)?,
        })
    }

    pub fn from_linear(fc: Linear) -> Self {
        Classifier { fc }
    }

    /// Maps a `(B, C, H, W)` final feature map to `(B, K)` logits.
    pub fn classify(&self, f4: &Tensor) -> Result<Tensor> {
        let dims = f4.dims();
        if dims.len() != 4 || dims[1] != self.fc.in_features() {
            return Err(CigError::shape(
                "classifier input",
                format!("(B, {}, H, W)", self.fc.in_features()),
                format!("{dims:?}"),
            ));
        }
        self.fc.forward(&f4.mean((2, 3))?)
    }

    pub fn detached(&self) -> Self {
        Classifier {
            fc: self.fc.detached(),
        }
    }
}

/// Un-normalised class scores for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn from_batch(t: &Tensor) -> Result<Vec<Logits>> {
        Ok(t.to_vec2::<f64>()?.into_iter().map(Logits).collect())
    }

    /// 1-based label of the highest score (first on ties).
    pub fn predicted_label(&self) -> u32 {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best as u32 + 1
    }
}

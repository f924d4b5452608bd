//! Separation of the last feature map into structural and categorical blocks,
//! cross-image fusion, and the two generation networks.
//!
//! Concatenations always place the categorical block first and the structural
//! block second, both for fusion and for the reconstruction target.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeaturePyramid, STAGES, STRIDE};
use crate::error::{CigError, Result};
use crate::nn::{self, Conv2d, Init, Linear, TransformerBlock};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSplit {
    pub tau: f64,
    pub c_structural: usize,
    pub c_categorical: usize,
}

impl ChannelSplit {
    pub fn total(&self) -> usize {
        self.c_structural + self.c_categorical
    }
}

/// `c_structural = floor(tau · C)`, the remainder is categorical.
pub fn split_channels(channels: usize, tau: f64) -> Result<ChannelSplit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CigError::invalid("sf.tau", format!("{tau} is outside (0, 1)")));
    }
    let c_structural = (tau * channels as f64).floor() as usize;
    if c_structural == 0 || c_structural >= channels {
        return Err(CigError::invalid(
            "sf.tau",
            format!("tau = {tau} leaves an empty block for C = {channels}"),
        ));
    }
    Ok(ChannelSplit {
        tau,
        c_structural,
        c_categorical: channels - c_structural,
    })
}

#[derive(Clone, Debug)]
pub struct SeparatedFeatures {
    pub structural: Tensor,
    pub categorical: Tensor,
}

impl SeparatedFeatures {
    /// `concat[categorical, structural]`, the reconstruction of `F^(4)`.
    pub fn recombined(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.categorical, &self.structural], 1)?)
    }
}

/// Input to the generator: the fused `F_sf`, or the summed feature maps when
/// fusion is replaced by direct addition.
#[derive(Clone, Debug)]
pub struct FusedFeatures(pub Tensor);

impl FusedFeatures {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Two per-position linear maps (1×1 convolutions; per-token affine maps for
/// transformer features) splitting `F^(4)` into categorical and structural parts.
#[derive(Clone, Debug)]
pub struct Extractors {
    split: ChannelSplit,
    categorical: Conv2d,
    structural: Conv2d,
}

impl Extractors {
    pub fn new(channels: usize, split: ChannelSplit, init: &mut Init) -> Result<Self> {
        Ok(Extractors {
            split,
            categorical: Conv2d::new(init, "sf.categorical", channels, split.c_categorical, 1, 1, 0)?,
            structural: Conv2d::new(init, "sf.structural", channels, split.c_structural, 1, 1, 0)?,
        })
    }

    pub fn from_convs(split: ChannelSplit, categorical: Conv2d, structural: Conv2d) -> Result<Self> {
        if categorical.out_channels() != split.c_categorical || structural.out_channels() != split.c_structural {
            return Err(CigError::shape(
                "extractor widths",
                format!("({}, {})", split.c_categorical, split.c_structural),
                format!("({}, {})", categorical.out_channels(), structural.out_channels()),
            ));
        }
        Ok(Extractors {
            split,
            categorical,
            structural,
        })
    }

    /// Extractors that copy the first `c_categorical` channels into the
    /// categorical block and the rest into the structural block, so that
    /// `concat[h_c(F), h_s(F)] = F` exactly.
    pub fn channel_selection(channels: usize, split: ChannelSplit) -> Result<Self> {
        let dev = nn::device();
        let select = |offset: usize, n: usize| -> Result<Conv2d> {
            let mut w = vec![0.0; n * channels];
            for i in 0..n {
                w[i * channels + offset + i] = 1.0;
            }
            Ok(Conv2d::from_tensors(
                Tensor::from_vec(w, (n, channels, 1, 1), &dev)?,
                Tensor::zeros(n, nn::DTYPE, &dev)?,
                1,
                0,
            ))
        };
        Self::from_convs(
            split,
            select(0, split.c_categorical)?,
            select(split.c_categorical, split.c_structural)?,
        )
    }

    pub fn split(&self) -> ChannelSplit {
        self.split
    }

    pub fn separate(&self, f4: &Tensor) -> Result<SeparatedFeatures> {
        let c = self.categorical.in_channels();
        if f4.rank() != 4 || f4.dim(1)? != c {
            return Err(CigError::shape(
                "extractor input",
                format!("(B, {c}, H, W)"),
                format!("{:?}", f4.dims()),
            ));
        }
        Ok(SeparatedFeatures {
            categorical: self.categorical.forward(f4)?,
            structural: self.structural.forward(f4)?,
        })
    }

    pub fn detached(&self) -> Self {
        Extractors {
            split: self.split,
            categorical: self.categorical.detached(),
            structural: self.structural.detached(),
        }
    }
}

/// `F_sf = concat[reference.categorical, main.structural]`.
pub fn fuse(main: &SeparatedFeatures, reference: &SeparatedFeatures) -> Result<FusedFeatures> {
    let (m, r) = (main.structural.dims(), reference.categorical.dims());
    if m.len() != 4 || r.len() != 4 || m[0] != r[0] || m[2..] != r[2..] {
        return Err(CigError::shape("fusion blocks", format!("{m:?}"), format!("{r:?}")));
    }
    if main.categorical.dims() != reference.categorical.dims()
        || main.structural.dims() != reference.structural.dims()
    {
        return Err(CigError::shape(
            "fusion split",
            format!("{:?}/{:?}", main.categorical.dims(), main.structural.dims()),
            format!("{:?}/{:?}", reference.categorical.dims(), reference.structural.dims()),
        ));
    }
    Ok(FusedFeatures(Tensor::cat(
        &[&reference.categorical, &main.structural],
        1,
    )?))
}

/// Element-wise sum of the two final feature maps, used in place of `F_sf`
/// when the separation step is disabled.
pub fn direct_add_fusion(f4_main: &Tensor, f4_ref: &Tensor) -> Result<FusedFeatures> {
    if f4_main.dims() != f4_ref.dims() {
        return Err(CigError::shape(
            "direct-add fusion",
            format!("{:?}", f4_main.dims()),
            format!("{:?}", f4_ref.dims()),
        ));
    }
    Ok(FusedFeatures((f4_main + f4_ref)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Unet,
    LightDecoder,
}

impl std::str::FromStr for GeneratorKind {
    type Err = CigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(GeneratorKind::Unet),
            "light_decoder" => Ok(GeneratorKind::LightDecoder),
            other => Err(CigError::invalid("generator.kind", format!("unsupported generator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    up_conv: Conv2d,
    merge_conv: Option<Conv2d>,
}

/// UNet-style decoder. The first block takes `[F_sf, F_m^(4)]`; each of the
/// first three blocks upsamples, convolves, concatenates the matching skip
/// stage `F_m^(3)`, `F_m^(2)`, `F_m^(1)` and convolves again. A fourth
/// upsampling restores the input resolution before the pixel projection.
#[derive(Clone, Debug)]
pub struct UnetGenerator {
    blocks: Vec<UpBlock>,
    to_pixels: Conv2d,
}

impl UnetGenerator {
    fn new(cfg: &BackboneConfig, init: &mut Init) -> Result<Self> {
        let ch = cfg.stage_channels();
        let mut c_in = 2 * cfg.channels;
        let mut blocks = Vec::with_capacity(STAGES);
        for i in 0..STAGES - 1 {
            let skip = ch[STAGES - 2 - i];
            blocks.push(UpBlock {
                up_conv: Conv2d::new(init, &format!("generator.up{i}.conv"), c_in, skip, 3, 1, 1)?,
                merge_conv: Some(Conv2d::new(init, &format!("generator.up{i}.merge"), 2 * skip, skip, 3, 1, 1)?),
            });
            c_in = skip;
        }
        blocks.push(UpBlock {
            up_conv: Conv2d::new(init, "generator.up3.conv", c_in, c_in, 3, 1, 1)?,
            merge_conv: None,
        });
        Ok(UnetGenerator {
            blocks,
            to_pixels: Conv2d::new(init, "generator.to_pixels", c_in, cfg.in_channels, 1, 1, 0)?,
        })
    }

    fn forward(&self, fused: &Tensor, pyramid: &FeaturePyramid) -> Result<Tensor> {
        let f4 = pyramid.last();
        if fused.dims() != f4.dims() {
            return Err(CigError::shape(
                "unet input",
                format!("{:?}", f4.dims()),
                format!("{:?}", fused.dims()),
            ));
        }
        let mut h = Tensor::cat(&[fused, f4], 1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.up_conv.forward(&nn::upsample2x(&h)?)?.silu()?;
            if let Some(merge) = &block.merge_conv {
                let skip = &pyramid.stages[STAGES - 2 - i];
                h = merge.forward(&Tensor::cat(&[&h, skip], 1)?)?.silu()?;
            }
        }
        nn::sigmoid(&self.to_pixels.forward(&h)?)
    }

    fn detached(&self) -> Self {
        UnetGenerator {
            blocks: self
                .blocks
                .iter()
                .map(|b| UpBlock {
                    up_conv: b.up_conv.detached(),
                    merge_conv: b.merge_conv.as_ref().map(Conv2d::detached),
                })
                .collect(),
            to_pixels: self.to_pixels.detached(),
        }
    }
}

/// Side length of the square pixel patch each decoder token is projected to.
const PATCH: usize = STRIDE / 2;

/// Lightweight transformer decoder: the `T` fused tokens are tiled four times
/// along the sequence, given learned positions, passed through one attention
/// block and projected to `PATCH × PATCH` pixel patches laid out on a
/// `2h × 2w` grid.
#[derive(Clone, Debug)]
pub struct LightDecoder {
    positions: Tensor,
    block: TransformerBlock,
    to_pixels: Linear,
    grid: usize,
    in_channels: usize,
}

impl LightDecoder {
    pub const REPEATS: usize = 4;

    fn new(cfg: &BackboneConfig, init: &mut Init) -> Result<Self> {
        let grid = cfg.input_size / STRIDE;
        let tokens = Self::REPEATS * grid * grid;
        let c = cfg.channels;
        Ok(LightDecoder {
            positions: init.uniform("generator.positions", &[tokens, c], 0.02)?,
            block: TransformerBlock::new(init, "generator.block", c, nn::heads_for(c, cfg.heads))?,
            to_pixels: Linear::new(init, "generator.to_pixels", c, cfg.in_channels * PATCH * PATCH)?,
            grid,
            in_channels: cfg.in_channels,
        })
    }

    /// Tokens of `F_sf` repeated four times: `(B, 4T, C)`.
    pub fn tiled_tokens(fused: &Tensor) -> Result<Tensor> {
        let tokens = nn::to_tokens(fused)?;
        let copies = vec![&tokens; Self::REPEATS];
        Ok(Tensor::cat(&copies, 1)?)
    }

    fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = fused.dims4()?;
        if h != self.grid || w != self.grid {
            return Err(CigError::shape(
                "light decoder input",
                format!("{0}x{0} tokens", self.grid),
                format!("{h}x{w}"),
            ));
        }
        let seq = Self::tiled_tokens(fused)?.broadcast_add(&self.positions)?;
        let seq = self.block.forward(&seq)?;
        let patches = self.to_pixels.forward(&seq)?; // (B, 4T, ch * P * P)
        let side = 2 * self.grid;
        let img = patches
            .reshape((b, side, side, self.in_channels, PATCH, PATCH))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((b, self.in_channels, side * PATCH, side * PATCH))?;
        nn::sigmoid(&img)
    }

    fn detached(&self) -> Self {
        LightDecoder {
            positions: self.positions.detach(),
            block: self.block.detached(),
            to_pixels: self.to_pixels.detached(),
            ..*self
        }
    }
}

#[derive(Clone, Debug)]
pub enum Generator {
    Unet(UnetGenerator),
    LightDecoder(LightDecoder),
}

impl Generator {
    pub fn new(kind: GeneratorKind, cfg: &BackboneConfig, init: &mut Init) -> Result<Self> {
        Ok(match kind {
            GeneratorKind::Unet => Generator::Unet(UnetGenerator::new(cfg, init)?),
            GeneratorKind::LightDecoder => Generator::LightDecoder(LightDecoder::new(cfg, init)?),
        })
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::Unet(_) => GeneratorKind::Unet,
            Generator::LightDecoder(_) => GeneratorKind::LightDecoder,
        }
    }

    /// Produces a `(B, in_channels, S, S)` image batch in `[0, 1]`.
    pub fn generate(&self, fused: &FusedFeatures, main: Option<&FeaturePyramid>) -> Result<Tensor> {
        match self {
            Generator::Unet(g) => {
                let pyramid = main.ok_or_else(|| {
                    CigError::invalid("generator.kind", "the unet generator needs the main image pyramid")
                })?;
                g.forward(fused.tensor(), pyramid)
            }
            Generator::LightDecoder(g) => g.forward(fused.tensor()),
        }
    }

    pub fn detached(&self) -> Self {
        match self {
            Generator::Unet(g) => Generator::Unet(g.detached()),
            Generator::LightDecoder(g) => Generator::LightDecoder(g.detached()),
        }
    }
}

/// Sum of squares over every non-batch dimension, per batch row.
pub(crate) fn per_row_sq_norm(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.sqr()?.reshape((b, ()))?.sum(D::Minus1)?)
}

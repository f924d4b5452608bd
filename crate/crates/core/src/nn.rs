//! Parameter storage and the handful of layers the encoder, extractors and
//! generators are built from.
//!
//! Layers hold the tensors of their [`Var`]s, so optimizer updates written
//! through [`Var::set`] are visible without rebuilding the modules. Every
//! module can produce a detached copy whose forward pass records no gradient
//! for its parameters.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CigError, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Encoder and classifier, trained on the classification loss.
    Encoder,
    /// Separation extractors and generator, trained on the generation loss.
    Generation,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, group: ParamGroup, value: Tensor) -> Result<Tensor> {
        if self.get(&name).is_some() {
            return Err(CigError::invalid(name, "duplicate parameter name"));
        }
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.params.push(Param { name, group, var });
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn group(&self, group: ParamGroup) -> Vec<&Param> {
        self.params.iter().filter(|p| p.group == group).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Flattened values of every parameter, in registration order.
    pub fn values(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.params
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.flatten_all()?.to_vec1::<f64>()?)))
            .collect()
    }

    pub fn group_values(&self, group: ParamGroup) -> Result<Vec<Vec<f64>>> {
        self.group(group)
            .into_iter()
            .map(|p| Ok(p.var.flatten_all()?.to_vec1::<f64>()?))
            .collect()
    }

    pub fn set_values(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let p = self
            .get(name)
            .ok_or_else(|| CigError::ConfigMismatch(format!("unknown parameter `{name}`")))?;
        let shape = p.var.shape().clone();
        if shape.elem_count() != values.len() {
            return Err(CigError::ConfigMismatch(format!(
                "parameter `{name}` has {} values, expected {}",
                values.len(),
                shape.elem_count()
            )));
        }
        p.var.set(&Tensor::from_vec(values, shape, &device())?)?;
        Ok(())
    }
}

/// Registers freshly initialised parameters under one group.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    group: ParamGroup,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Init { store, rng, group }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(values, shape, &device())?;
        self.store.insert(name.to_string(), self.group, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DTYPE, &device())? * value)?;
        self.store.insert(name.to_string(), self.group, t)
    }
}

pub fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = fan_in_bound(c_in * kernel * kernel);
        let weight = init.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = init.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn detached(&self) -> Self {
        Conv2d {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
            ..*self
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = init.uniform(&format!("{name}.weight"), &[d_out, d_in], fan_in_bound(d_in))?;
        let bias = init.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Linear { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        Linear { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Applies `x W^T + b` over the last dimension of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }

    pub fn detached(&self) -> Self {
        Linear {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    pub fn detached(&self) -> Self {
        LayerNorm {
            gamma: self.gamma.detach(),
            beta: self.beta.detach(),
        }
    }
}

/// Multi-head self-attention over `(B, N, D)` token sequences.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(CigError::invalid("heads", format!("{heads} heads do not divide width {dim}")));
        }
        Ok(SelfAttention {
            qkv: Linear::new(init, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        self.proj.forward(&out)
    }

    pub fn detached(&self) -> Self {
        SelfAttention {
            qkv: self.qkv.detached(),
            proj: self.proj.detached(),
            heads: self.heads,
        }
    }
}

/// Pre-norm transformer block: attention and a two-layer feed-forward
/// network, each with a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim)?,
            ff_in: Linear::new(init, &format!("{name}.ff_in"), dim, 2 * dim)?,
            ff_out: Linear::new(init, &format!("{name}.ff_out"), 2 * dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.ff_in.forward(&self.norm2.forward(&x)?)?.silu()?;
        Ok((&x + self.ff_out.forward(&h)?)?)
    }

    pub fn detached(&self) -> Self {
        TransformerBlock {
            norm1: self.norm1.detached(),
            attn: self.attn.detached(),
            norm2: self.norm2.detached(),
            ff_in: self.ff_in.detached(),
            ff_out: self.ff_out.detached(),
        }
    }
}

/// Largest head count not above `max_heads` that divides `dim`.
pub fn heads_for(dim: usize, max_heads: usize) -> usize {
    (1..=max_heads.max(1)).rev().find(|h| dim.is_multiple_of(*h)).unwrap_or(1)
}

/// Softmax over the last dimension; the max shift is treated as a constant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Logistic function written through `tanh`, which keeps its gradient finite
/// for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Nearest-neighbour 2× upsampling of a `(B, C, H, W)` tensor.
///
/// Built from broadcast and reshape so gradients accumulate correctly when
/// the input also feeds other nodes.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// `(B, C, H, W)` → `(B, H·W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H·W, C)` → `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(CigError::shape("token grid", h * w, n));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

//! SSIM and the generation / classification objectives.
//!
//! Tensor-valued functions take a leading batch dimension and return the
//! batch mean as a scalar tensor, so they can be differentiated directly.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{CigError, Result};
use crate::fusion::{per_row_sq_norm, SeparatedFeatures};
use crate::nn::{self, DTYPE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Dynamic range of pixel values.
    pub dynamic_range: f64,
    /// Clamp margin applied to SSIM values before taking logarithms.
    pub epsilon: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            dynamic_range: 1.0,
            epsilon: 1e-6,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (0.01 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamic_range.is_nan() || self.dynamic_range <= 0.0 {
            return Err(CigError::invalid("loss.dynamic_range", "must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(CigError::invalid("loss.ssim_epsilon", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 5.0,
            beta: 2.0,
            lambda: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("loss.alpha", self.alpha), ("loss.beta", self.beta), ("loss.lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CigError::invalid(name, format!("{v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

/// How squared differences are aggregated per sample before the batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_sg: f64,
    pub l_cg: f64,
    pub l_rc: f64,
    pub l_g: f64,
    pub l_ce_main: f64,
    pub l_ce_fusion: f64,
    pub l_c: f64,
}

impl LossBundle {
    pub fn assemble(l_sg: f64, l_cg: f64, l_rc: f64, l_ce_main: f64, l_ce_fusion: f64, w: &LossWeights) -> Self {
        LossBundle {
            l_sg,
            l_cg,
            l_rc,
            l_g: generation_loss(l_sg, l_cg, l_rc, w),
            l_ce_main,
            l_ce_fusion,
            l_c: classification_loss(l_ce_main, l_ce_fusion, w.lambda),
        }
    }

    /// Checks the weighted-sum identities and finiteness.
    pub fn is_consistent(&self, w: &LossWeights) -> bool {
        let all = [
            self.l_sg,
            self.l_cg,
            self.l_rc,
            self.l_g,
            self.l_ce_main,
            self.l_ce_fusion,
            self.l_c,
        ];
        all.iter().all(|v| v.is_finite())
            && self.l_g == generation_loss(self.l_sg, self.l_cg, self.l_rc, w)
            && self.l_c == classification_loss(self.l_ce_main, self.l_ce_fusion, w.lambda)
    }
}

/// Per-sample global SSIM of two `(B, …)` batches, returned as a `(B,)` tensor.
///
/// Means, variances and covariance are taken over all pixels of each image,
/// with the `n - 1` sample normalisation.
pub fn ssim_batch(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(CigError::shape("ssim", format!("{:?}", x.dims()), format!("{:?}", y.dims())));
    }
    let b = x.dim(0)?;
    let x = x.reshape((b, ()))?;
    let y = y.reshape((b, ()))?;
    let n = x.dim(1)?;
    if n < 2 {
        return Err(CigError::shape("ssim", "at least 2 pixels", n));
    }
    let mu_x = x.mean_keepdim(D::Minus1)?;
    let mu_y = y.mean_keepdim(D::Minus1)?;
    let dx = x.broadcast_sub(&mu_x)?;
    let dy = y.broadcast_sub(&mu_y)?;
    let norm = 1.0 / (n as f64 - 1.0);
    let var_x = (dx.sqr()?.sum(D::Minus1)? * norm)?;
    let var_y = (dy.sqr()?.sum(D::Minus1)? * norm)?;
    let cov = ((&dx * &dy)?.sum(D::Minus1)? * norm)?;
    let mu_x = mu_x.squeeze(D::Minus1)?;
    let mu_y = mu_y.squeeze(D::Minus1)?;
    let (c1, c2) = (p.c1(), p.c2());
    let lum_num = ((&mu_x * &mu_y)? * 2.0)?.affine(1.0, c1)?;
    let con_num = (cov * 2.0)?.affine(1.0, c2)?;
    let lum_den = (mu_x.sqr()? + mu_y.sqr()?)?.affine(1.0, c1)?;
    let con_den = (var_x + var_y)?.affine(1.0, c2)?;
    Ok(((lum_num * con_num)? / (lum_den * con_den)?)?)
}

fn image_tensor(img: &Image) -> Result<Tensor> {
    let (c, h, w) = img.shape();
    Ok(Tensor::from_slice(img.pixels(), (1, c, h, w), &nn::device())?)
}

pub fn ssim(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(CigError::shape("ssim", format!("{:?}", x.shape()), format!("{:?}", y.shape())));
    }
    Ok(ssim_batch(&image_tensor(x)?, &image_tensor(y)?, p)?.to_vec1::<f64>()?[0])
}

/// Structural generation loss from two SSIM values, after clamping both to
/// `[ε, 1 − ε]`.
pub fn structural_loss_from_ssim(ssim_main_fused: f64, ssim_ref_fused: f64, epsilon: f64) -> f64 {
    let s_m = ssim_main_fused.clamp(epsilon, 1.0 - epsilon);
    let s_r = ssim_ref_fused.clamp(epsilon, 1.0 - epsilon);
    -0.5 * (s_m.ln() + (1.0 - s_r).ln())
}

/// Batch mean of `−½(log SSIM(X_m, X_f) + log(1 − SSIM(X_r, X_f)))`.
pub fn structural_generation_loss(x_m: &Tensor, x_r: &Tensor, x_f: &Tensor, p: &SsimParams) -> Result<Tensor> {
    let lo = p.epsilon;
    let hi = 1.0 - p.epsilon;
    let s_m = ssim_batch(x_m, x_f, p)?.clamp(lo, hi)?;
    let s_r = ssim_batch(x_r, x_f, p)?.clamp(lo, hi)?;
    let per = ((s_m.log()? + s_r.affine(-1.0, 1.0)?.log()?)? * -0.5)?;
    Ok(per.mean_all()?)
}

/// Batch mean of the squared distance between raw score vectors.
pub fn categorical_generation_loss(p_r: &Tensor, p_f: &Tensor, reduction: Reduction) -> Result<Tensor> {
    if p_r.dims() != p_f.dims() || p_r.rank() != 2 {
        return Err(CigError::shape(
            "categorical generation loss",
            format!("{:?}", p_r.dims()),
            format!("{:?}", p_f.dims()),
        ));
    }
    let per = (p_r - p_f)?.sqr()?;
    let per = match reduction {
        Reduction::Sum => per.sum(D::Minus1)?,
        Reduction::Mean => per.mean(D::Minus1)?,
    };
    Ok(per.mean_all()?)
}

/// Batch mean of `‖F − concat[h_c(F), h_s(F)]‖²`.
pub fn reconstruction_loss(f4: &Tensor, separated: &SeparatedFeatures, reduction: Reduction) -> Result<Tensor> {
    let rec = separated.recombined()?;
    if rec.dims() != f4.dims() {
        return Err(CigError::shape(
            "reconstruction loss",
            format!("{:?}", f4.dims()),
            format!("{:?}", rec.dims()),
        ));
    }
    let per = per_row_sq_norm(&(f4 - rec)?)?;
    let per = match reduction {
        Reduction::Sum => per,
        Reduction::Mean => (per / (f4.elem_count() / f4.dim(0)?) as f64)?,
    };
    Ok(per.mean_all()?)
}

pub fn generation_loss(l_sg: f64, l_cg: f64, l_rc: f64, w: &LossWeights) -> f64 {
    w.alpha * l_sg + w.beta * l_cg + l_rc
}

pub fn classification_loss(ce_main: f64, ce_fusion: f64, lambda: f64) -> f64 {
    ce_main + lambda * ce_fusion
}

/// `(B, K)` one-hot rows for 1-based labels.
pub fn one_hot(labels: &[u32], k: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 || l as usize > k {
            return Err(CigError::LabelOutOfRange { label: l, k });
        }
        v[i * k + l as usize - 1] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), k), &nn::device())?)
}

/// Batch-mean softmax cross-entropy of `(B, K)` logits against 1-based labels.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() {
        return Err(CigError::shape("cross entropy labels", b, labels.len()));
    }
    let target = one_hot(labels, k)?;
    let picked = (nn::log_softmax_last(logits)? * target)?.sum(D::Minus1)?;
    Ok((picked.mean_all()? * -1.0)?)
}

/// Cross-entropy of a single score vector.
pub fn cross_entropy_single(logits: &[f64], label: u32) -> Result<f64> {
    let t = Tensor::from_slice(logits, (1, logits.len()), &nn::device())?;
    Ok(cross_entropy(&t, &[label])?.to_scalar::<f64>()?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    fn img(v: Vec<f64>, h: usize, w: usize) -> Image {
        Image::new(1, h, w, v).unwrap()
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = img((0..16).map(|i| (i as f64 * 0.37).sin().abs()).collect(), 4, 4);
        assert!((ssim(&x, &x, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_black_vs_white() {
        let p = SsimParams::default();
        let s = ssim(&Image::filled(1, 4, 4, 0.0), &Image::filled(1, 4, 4, 1.0), &p).unwrap();
        let c1 = p.c1();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-10);
        assert!((s - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn ssim_shape_mismatch() {
        let p = SsimParams::default();
        assert!(ssim(&Image::filled(1, 4, 4, 0.0), &Image::filled(1, 2, 8, 0.0), &p).is_err());
    }

    #[test]
    fn structural_loss_examples() {
        let eps = 1e-6;
        assert!(structural_loss_from_ssim(1.0 - eps, eps, eps) < 2e-6);
        let v = structural_loss_from_ssim(1.0, 0.5, eps);
        assert!((v - 0.346_574).abs() < 1e-5, "{v}");
        let worst = structural_loss_from_ssim(1.0, 1.0, eps);
        assert!((worst - (-0.5 * ((1.0 - eps).ln() + eps.ln()))).abs() < 1e-9);
        assert!(worst > 6.9);
    }

    #[test]
    fn categorical_loss_examples() {
        let dev = device();
        let a = Tensor::new(&[[0.0f64, 1.0]], &dev).unwrap();
        let b = Tensor::new(&[[1.0f64, 0.0]], &dev).unwrap();
        let l = scalar(&categorical_generation_loss(&a, &b, Reduction::Sum).unwrap()).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(scalar(&categorical_generation_loss(&a, &a, Reduction::Sum).unwrap()).unwrap(), 0.0);
        let l3 = scalar(&categorical_generation_loss(&(&a * 3.0).unwrap(), &(&b * 3.0).unwrap(), Reduction::Sum).unwrap()).unwrap();
        assert!((l3 - 18.0).abs() < 1e-12);
        assert_eq!(scalar(&categorical_generation_loss(&a, &b, Reduction::Mean).unwrap()).unwrap(), 1.0);
        let c = Tensor::new(&[[1.0f64, 0.0, 0.0]], &dev).unwrap();
        assert!(categorical_generation_loss(&a, &c, Reduction::Sum).is_err());
    }

    #[test]
    fn weighted_sums() {
        let w = LossWeights::default();
        assert!((generation_loss(0.1, 0.2, 0.3, &w) - 1.2).abs() < 1e-12);
        assert_eq!(generation_loss(0.0, 0.0, 0.0, &w), 0.0);
        let w0 = LossWeights { alpha: 0.0, beta: 0.0, lambda: 0.2 };
        assert_eq!(generation_loss(0.4, 0.7, 0.3, &w0), 0.3);
        assert!((classification_loss(1.0, 0.5, 0.2) - 1.1).abs() < 1e-12);
        assert_eq!(classification_loss(1.0, 0.5, 0.0), 1.0);
        assert_eq!(classification_loss(1.0, 0.5, 1.0), 1.5);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = cross_entropy_single(&[0.0; 5], 3).unwrap();
        assert!((uniform - 5f64.ln()).abs() < 1e-12);
        let confident = cross_entropy_single(&[10.0, -10.0], 1).unwrap();
        let expect = (-20f64).exp().ln_1p();
        assert!((confident - expect).abs() < 1e-15, "{confident} vs {expect}");
        let a = cross_entropy_single(&[0.3, -1.2, 2.0], 2).unwrap();
        let b = cross_entropy_single(&[100.3, 98.8, 102.0], 2).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(cross_entropy_single(&[0.0, 0.0], 3).is_err());
        assert!(cross_entropy_single(&[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn bundle_consistency() {
        let w = LossWeights::default();
        let b = LossBundle::assemble(0.1, 0.2, 0.3, 1.0, 0.5, &w);
        assert!(b.is_consistent(&w));
        let mut bad = b;
        bad.l_g += 1.0;
        assert!(!bad.is_consistent(&w));
    }
}

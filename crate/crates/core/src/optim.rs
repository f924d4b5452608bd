//! Adam with per-parameter step counts and plain-vector moment buffers, so the
//! full optimizer state can be checkpointed exactly.

use candle_core::backprop::GradStore;
use serde::{Deserialize, Serialize};

use crate::error::{CigError, Result};
use crate::nn::Param;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub name: String,
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    state: Vec<MomentState>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        let state = params
            .iter()
            .map(|p| {
                let n = p.var.elem_count();
                MomentState {
                    name: p.name.clone(),
                    steps: 0,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Adam { config, state }
    }

    pub fn from_state(config: AdamConfig, state: Vec<MomentState>) -> Self {
        Adam { config, state }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn state(&self) -> &[MomentState] {
        &self.state
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    /// Parameters without a gradient keep both their value and moments.
    pub fn step(&mut self, params: &[&Param], grads: &GradStore) -> Result<()> {
        if params.len() != self.state.len() {
            return Err(CigError::ConfigMismatch(format!(
                "optimizer tracks {} parameters, got {}",
                self.state.len(),
                params.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (p, st) in params.iter().zip(self.state.iter_mut()) {
            debug_assert_eq!(p.name, st.name);
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let g: Vec<f64> = g.flatten_all()?.to_vec1()?;
            let mut w: Vec<f64> = p.var.flatten_all()?.to_vec1()?;
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps as i32);
            let bc2 = 1.0 - beta2.powi(st.steps as i32);
            for i in 0..w.len() {
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g[i];
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let shape = p.var.shape().clone();
            p.var.set(&candle_core::Tensor::from_vec(w, shape, p.var.device())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamGroup, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Init::new(&mut store, &mut rng, ParamGroup::Encoder)
            .constant("w", &[3], 1.0)
            .unwrap();
        let params = store.group(ParamGroup::Encoder);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
        let w = params[0].var.as_tensor();
        let coef = candle_core::Tensor::new(&[2.0f64, -3.0, 0.5], w.device()).unwrap();
        let loss = (w * &coef).unwrap().sum_all().unwrap();
        adam.step(&params, &loss.backward().unwrap()).unwrap();
        let after: Vec<f64> = params[0].var.to_vec1().unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        for (a, g) in after.iter().zip([2.0f64, -3.0, 0.5]) {
            let expect = 1.0 - 0.1 * g / (g.abs() + 1e-8);
            assert!((a - expect).abs() < 1e-12);
        }
        assert_eq!(adam.state()[0].steps, 1);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Init::new(&mut store, &mut rng, ParamGroup::Generation)
            .uniform("w", &[4], 1.0)
            .unwrap();
        let params = store.group(ParamGroup::Generation);
        let before: Vec<f64> = params[0].var.to_vec1().unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &params);
        let loss = params[0].var.as_tensor().sqr().unwrap().sum_all().unwrap();
        adam.step(&params, &loss.backward().unwrap()).unwrap();
        let after: Vec<f64> = params[0].var.to_vec1().unwrap();
        assert_eq!(before, after);
    }
}

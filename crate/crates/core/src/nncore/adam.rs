use crate::error::{Result, SdqlError};

use super::mlp::{MlpParams, ParamGrads};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Adam moment estimates for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: ParamGrads,
    pub second_moment: ParamGrads,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self::with_hyper(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON)
    }

    pub fn with_hyper(params: &MlpParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: ParamGrads::zeros_like(params),
            second_moment: ParamGrads::zeros_like(params),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One bias-corrected Adam update, applied in place.
    ///
    /// Non-finite gradients are refused and leave both `self` and `params` untouched.
    pub fn step(&mut self, params: &mut MlpParams, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(SdqlError::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(SdqlError::InvalidConfig(format!(
                "Adam betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !grads.matches(params) || !self.first_moment.matches(params) {
            return Err(SdqlError::Shape(format!(
                "Adam state and gradients do not match network {:?}",
                params.layer_sizes
            )));
        }
        if !grads.is_finite() {
            return Err(SdqlError::Numeric("non-finite gradient refused by Adam".into()));
        }

        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);

        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.first_moment.layers.iter_mut())
            .zip(self.second_moment.layers.iter_mut())
        {
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            };
            update(&mut p.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut p.biases, &g.biases, &mut m.biases, &mut v.biases);
        }
        Ok(())
    }
}

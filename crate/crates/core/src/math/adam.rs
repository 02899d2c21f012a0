use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Self::with_config(param_count, AdamConfig::default())
    }

    pub fn with_config(param_count: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        let g = grads.flatten();
        if g.len() != self.m.len() || params.param_count() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state holds {} moments, params {} and grads {}",
                self.m.len(),
                params.param_count(),
                g.len()
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of layer {}",
                grads.layer_of(i).unwrap_or("?")
            )));
        }
        let mut p = params.flatten();
        self.apply(&mut p, &g, lr);
        params.assign_flat(&p)
    }

    fn apply(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Layer, Tensor2};

    fn scalar_set(w: f64) -> ParamSet {
        ParamSet::new(vec![Layer::new("w", Tensor2::scalar(w), vec![]).unwrap()])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_set(1.5);
        let mut adam = Adam::new(1);
        adam.step(&mut p, &scalar_set(0.0), 0.1).unwrap();
        assert_eq!(p.flatten(), vec![1.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut p = scalar_set(0.0);
            let mut adam = Adam::new(1);
            adam.step(&mut p, &scalar_set(g), 0.1).unwrap();
            let moved = p.flatten()[0];
            assert!((moved + 0.1 * f64::signum(g)).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn descends_on_square() {
        let mut p = scalar_set(1.0);
        let mut adam = Adam::new(1);
        let mut last = 1.0f64;
        for _ in 0..10 {
            let w = p.flatten()[0];
            adam.step(&mut p, &scalar_set(2.0 * w), 0.1).unwrap();
            let now = p.flatten()[0].abs();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut p = scalar_set(1.0);
        let mut adam = Adam::new(1);
        let err = adam.step(&mut p, &scalar_set(f64::NAN), 0.1).unwrap_err();
        assert!(err.to_string().contains("layer w"), "{err}");
    }
}

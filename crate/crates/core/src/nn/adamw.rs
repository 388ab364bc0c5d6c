use serde::{Deserialize, Serialize};

use super::params::PolicyParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.learning_rate.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid AdamW settings: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        AdamWState {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One decoupled-weight-decay Adam update of `params` in place.
    pub fn step(&mut self, params: &mut PolicyParams, grads: &[f64]) -> Result<()> {
        if grads.len() != params.data.len() || self.m.len() != params.data.len() {
            return Err(Error::Contract(format!(
                "optimizer shapes differ: {} params, {} grads, {} moments",
                params.data.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in `{}`",
                params.owner_of(i)
            )));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for (((p, &g), m), v) in params
            .data
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamBuilder;

    fn params(values: &[f64]) -> PolicyParams {
        let mut b = ParamBuilder::new();
        b.alloc("layer.weight", &[values.len()]);
        let mut p = b.finish();
        p.data.copy_from_slice(values);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = params(&[1.0, -2.0, 0.5]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamWState::new(cfg, 3);
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let start = [1.0, -2.0, 0.5, 0.0];
        let g = [0.3, -4.0, 1e-2, -7.5];
        let mut p = params(&start);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamWState::new(cfg, 4);
        opt.step(&mut p, &g).unwrap();
        for i in 0..4 {
            let expected = -cfg.learning_rate * g[i].signum();
            let moved = p.data[i] - start[i];
            assert!(((moved - expected) / expected).abs() < 1e-6, "{i}: {moved}");
        }
    }

    #[test]
    fn decay_alone_shrinks_by_one_minus_lr_times_d() {
        let mut p = params(&[2.0, -4.0]);
        let cfg = AdamWConfig { weight_decay: 0.1, learning_rate: 0.01, ..Default::default() };
        let mut opt = AdamWState::new(cfg, 2);
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert!((p.data[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
        assert!((p.data[1] + 4.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut p = params(&[1.0, 1.0]);
        let mut opt = AdamWState::new(AdamWConfig::default(), 2);
        let err = opt.step(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains("layer.weight")));
    }
}

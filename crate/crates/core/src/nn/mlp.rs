use serde::{Deserialize, Serialize};

use super::params::{elu, elu_grad_from_output, Dense, ParamBuilder};
use crate::error::{Error, Result};
use crate::math::RngStream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    None,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(input_width: usize, hidden: &[usize], output_width: usize) -> Self {
        MlpSpec {
            input_width,
            hidden: hidden.to_vec(),
            output_width,
            output_activation: OutputActivation::None,
        }
    }

    pub fn with_tanh(mut self) -> Self {
        self.output_activation = OutputActivation::Tanh;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.output_width == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("all MLP widths must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// ELU multilayer perceptron over a slice of a flat parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

/// Activations kept from the forward pass: `acts[0]` is the input and
/// `acts[i + 1]` the output of layer `i`.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    pub batch: usize,
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn alloc(spec: MlpSpec, builder: &mut ParamBuilder, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input_width];
        widths.extend(&spec.hidden);
        widths.push(spec.output_width);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::alloc(builder, &format!("{prefix}.{i}"), w[0], w[1]))
            .collect();
        Ok(Mlp { spec, layers })
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width
    }

    pub fn init(&self, params: &mut [f64], output_gain: f64, rng: &mut RngStream) {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let gain = if i == last { output_gain } else { 2f64.sqrt() };
            layer.init(params, gain, rng);
        }
    }

    pub fn forward<'c>(
        &self,
        params: &[f64],
        x: &[f64],
        batch: usize,
        cache: &'c mut MlpCache,
    ) -> Result<&'c [f64]> {
        if x.len() != batch * self.spec.input_width {
            return Err(Error::Contract(format!(
                "MLP input has {} values, expected {} x {}",
                x.len(),
                batch,
                self.spec.input_width
            )));
        }
        let n = self.layers.len();
        cache.batch = batch;
        cache.acts.resize_with(n + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.acts.split_at_mut(i + 1);
            let out = &mut rest[0];
            layer.forward(params, &done[i], batch, out);
            if i + 1 < n {
                out.iter_mut().for_each(|v| *v = elu(*v));
            } else if self.spec.output_activation == OutputActivation::Tanh {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(cache.output())
    }

    /// Reverse pass for the cached forward. Parameter gradients are added
    /// into `grads`; returns the gradient with respect to the input when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        dy: &[f64],
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let n = self.layers.len();
        let batch = cache.batch;
        let mut delta: Vec<f64> = dy.to_vec();
        if self.spec.output_activation == OutputActivation::Tanh {
            for (d, y) in delta.iter_mut().zip(cache.acts[n].iter()) {
                *d *= 1.0 - y * y;
            }
        }
        let mut next = Vec::new();
        for i in (0..n).rev() {
            let need_dx = i > 0 || want_input_grad;
            let layer = &self.layers[i];
            layer.backward(
                params,
                &cache.acts[i],
                &delta,
                batch,
                grads,
                if need_dx { Some(&mut next) } else { None },
            );
            if i == 0 {
                return if want_input_grad { Some(next) } else { None };
            }
            for (d, y) in next.iter_mut().zip(cache.acts[i].iter()) {
                *d *= elu_grad_from_output(*y);
            }
            std::mem::swap(&mut delta, &mut next);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_unit() -> (Mlp, Vec<f64>) {
        let mut b = ParamBuilder::new();
        // one hidden ELU unit followed by an identity read-out
        let mlp = Mlp::alloc(MlpSpec::new(1, &[1], 1), &mut b, "m").unwrap();
        let mut p = b.finish().data;
        p[mlp.layers[0].w] = 1.0;
        p[mlp.layers[1].w] = 1.0;
        (mlp, p)
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut b = ParamBuilder::new();
        let mlp = Mlp::alloc(MlpSpec::new(4, &[8, 8], 3).with_tanh(), &mut b, "m").unwrap();
        let p = b.finish().data;
        let mut cache = MlpCache::default();
        let y = mlp.forward(&p, &[1.0, -2.0, 3.0, 0.5], 1, &mut cache).unwrap();
        assert_eq!(y, &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn elu_branches() {
        let (mlp, p) = single_unit();
        let mut cache = MlpCache::default();
        assert_eq!(mlp.forward(&p, &[2.0], 1, &mut cache).unwrap(), &[2.0]);
        let neg = mlp.forward(&p, &[-1.0], 1, &mut cache).unwrap()[0];
        assert!((neg - (std::f64::consts::E.recip() - 1.0)).abs() < 1e-15);
        assert!((neg + 0.632_120_558_828_557_7).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_is_a_contract_error() {
        let (mlp, p) = single_unit();
        let mut cache = MlpCache::default();
        assert!(matches!(mlp.forward(&p, &[1.0, 2.0], 1, &mut cache), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut b = ParamBuilder::new();
        let mlp = Mlp::alloc(MlpSpec::new(3, &[5], 2), &mut b, "m").unwrap();
        let mut p = b.finish().data;
        mlp.init(&mut p, 1.0, &mut RngStream::new(1, 0));
        let mut cache = MlpCache::default();
        mlp.forward(&p, &[0.1, 0.2, 0.3], 1, &mut cache).unwrap();
        let mut g = vec![0.0; p.len()];
        mlp.backward(&p, &cache, &[0.0, 0.0], &mut g, false);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_layer_quadratic_loss_gradient() {
        // y = w·x + b, L = ½(y − t)² ⇒ ∂L/∂w = (y − t)·x, ∂L/∂b = y − t
        let mut b = ParamBuilder::new();
        let mlp = Mlp::alloc(MlpSpec::new(2, &[], 1), &mut b, "m").unwrap();
        let mut p = b.finish().data;
        let layer = mlp.layers[0];
        p[layer.w] = 0.5;
        p[layer.w + 1] = -1.5;
        p[layer.b] = 0.25;
        let x = [2.0, 3.0];
        let t = 1.0;
        let mut cache = MlpCache::default();
        let y = mlp.forward(&p, &x, 1, &mut cache).unwrap()[0];
        assert_eq!(y, 0.5 * 2.0 - 1.5 * 3.0 + 0.25);
        let mut g = vec![0.0; p.len()];
        let dx = mlp.backward(&p, &cache, &[y - t], &mut g, true).unwrap();
        assert_eq!(g[layer.w], (y - t) * 2.0);
        assert_eq!(g[layer.w + 1], (y - t) * 3.0);
        assert_eq!(g[layer.b], y - t);
        assert_eq!(dx, vec![(y - t) * 0.5, (y - t) * -1.5]);
    }
}

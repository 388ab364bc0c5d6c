//! Central finite differences against an analytic gradient.

use crate::math::RngStream;

/// Result of comparing one coordinate.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckWorst {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Denominator floor for the relative error, so coordinates whose gradient
/// is zero in both estimates do not divide by zero.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Picks `count` distinct coordinates of a `len`-long parameter vector, or
/// all of them when `len <= count`.
pub fn sample_coordinates(len: usize, count: usize, rng: &mut RngStream) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut idx = rng.sample_indices(len, count);
    idx.sort_unstable();
    idx
}

/// Maximum relative error between `analytic` and the central difference of
/// `loss` over `coords`, perturbing `params` by `±h` one coordinate at a time.
pub fn gradient_check(
    params: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> GradCheckWorst {
    let mut worst = GradCheckWorst {
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_error: 0.0,
    };
    for &i in coords {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        if rel > worst.rel_error || !rel.is_finite() {
            worst = GradCheckWorst {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: rel,
            };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::{Mlp, MlpCache, MlpSpec};
    use crate::nn::params::ParamBuilder;

    #[test]
    fn linear_network_quadratic_loss_is_exact() {
        let mut b = ParamBuilder::new();
        let mlp = Mlp::alloc(MlpSpec::new(3, &[], 2), &mut b, "lin").unwrap();
        let mut p = b.finish().data;
        let mut rng = RngStream::new(5, 0);
        mlp.init(&mut p, 1.0, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let target = [0.2, -0.4];
        let loss = |q: &[f64]| {
            let mut c = MlpCache::default();
            let y = mlp.forward(q, &x, 1, &mut c).unwrap();
            0.5 * y.iter().zip(&target).map(|(a, t)| (a - t).powi(2)).sum::<f64>()
        };
        let mut cache = MlpCache::default();
        let y = mlp.forward(&p, &x, 1, &mut cache).unwrap().to_vec();
        let dy: Vec<f64> = y.iter().zip(&target).map(|(a, t)| a - t).collect();
        let mut g = vec![0.0; p.len()];
        mlp.backward(&p, &cache, &dy, &mut g, false);
        let coords: Vec<usize> = (0..p.len()).collect();
        let worst = gradient_check(&mut p, &g, &coords, 1e-5, loss);
        assert!(worst.rel_error < 1e-9, "{worst:?}");
    }
}

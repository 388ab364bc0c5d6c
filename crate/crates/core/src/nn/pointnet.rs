//! Shared per-point transform, max+mean pooling over points, then a small
//! post-pool MLP. Permutation invariant by construction.

use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpCache, MlpSpec};
use super::params::{elu, elu_grad_from_output, Dense, ParamBuilder};
use crate::error::{Error, Result};
use crate::math::RngStream;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointEncoderSpec {
    /// Widths of the two shared per-point layers.
    pub point_layers: [usize; 2],
    /// Widths of the two post-pool layers; the second is the feature width.
    pub post_layers: [usize; 2],
}

impl Default for PointEncoderSpec {
    fn default() -> Self {
        PointEncoderSpec {
            point_layers: [32, 64],
            post_layers: [128, 128],
        }
    }
}

impl PointEncoderSpec {
    pub fn output_width(&self) -> usize {
        self.post_layers[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEncoder {
    pub spec: PointEncoderSpec,
    pub point1: Dense,
    pub point2: Dense,
    /// Post-pool layers; ELU on both, including the output.
    pub post: Mlp,
}

#[derive(Clone, Debug, Default)]
pub struct PointEncoderCache {
    batch: usize,
    points: usize,
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    post: MlpCache,
    output: Vec<f64>,
}

impl PointEncoderCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl PointEncoder {
    pub fn alloc(spec: PointEncoderSpec, builder: &mut ParamBuilder, prefix: &str) -> Result<Self> {
        if spec.point_layers.contains(&0) || spec.post_layers.contains(&0) {
            return Err(Error::Config("point encoder widths must be >= 1".into()));
        }
        let [c1, c2] = spec.point_layers;
        let point1 = Dense::alloc(builder, &format!("{prefix}.point.0"), 3, c1);
        let point2 = Dense::alloc(builder, &format!("{prefix}.point.1"), c1, c2);
        let post = Mlp::alloc(
            MlpSpec::new(2 * c2, &[spec.post_layers[0]], spec.post_layers[1]),
            builder,
            &format!("{prefix}.post"),
        )?;
        Ok(PointEncoder {
            spec,
            point1,
            point2,
            post,
        })
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn init(&self, params: &mut [f64], rng: &mut RngStream) {
        let g = 2f64.sqrt();
        self.point1.init(params, g, rng);
        self.point2.init(params, g, rng);
        self.post.init(params, g, rng);
    }

    /// `clouds` holds `batch` clouds of `points` xyz triples each.
    pub fn forward<'c>(
        &self,
        params: &[f64],
        clouds: &[f64],
        batch: usize,
        points: usize,
        cache: &'c mut PointEncoderCache,
    ) -> Result<&'c [f64]> {
        if points == 0 || clouds.len() != batch * points * 3 {
            return Err(Error::Contract(format!(
                "point cloud input has {} values, expected {batch} x {points} x 3",
                clouds.len()
            )));
        }
        let rows = batch * points;
        let c2 = self.spec.point_layers[1];
        cache.batch = batch;
        cache.points = points;
        canonical_order(clouds, batch, points, &mut cache.input);
        self.point1.forward(params, &cache.input, rows, &mut cache.h1);
        cache.h1.iter_mut().for_each(|v| *v = elu(*v));
        self.point2.forward(params, &cache.h1, rows, &mut cache.h2);
        cache.h2.iter_mut().for_each(|v| *v = elu(*v));

        cache.pooled.clear();
        cache.pooled.resize(batch * 2 * c2, 0.0);
        cache.argmax.clear();
        cache.argmax.resize(batch * c2, 0);
        let inv = 1.0 / points as f64;
        for b in 0..batch {
            let block = &cache.h2[b * points * c2..(b + 1) * points * c2];
            let (maxes, means) = cache.pooled[b * 2 * c2..(b + 1) * 2 * c2].split_at_mut(c2);
            let arg = &mut cache.argmax[b * c2..(b + 1) * c2];
            maxes.copy_from_slice(&block[..c2]);
            means.copy_from_slice(&block[..c2]);
            for p in 1..points {
                let row = &block[p * c2..(p + 1) * c2];
                for c in 0..c2 {
                    // strict comparison keeps the first maximizer
                    if row[c] > maxes[c] {
                        maxes[c] = row[c];
                        arg[c] = p;
                    }
                    means[c] += row[c];
                }
            }
            means.iter_mut().for_each(|m| *m *= inv);
        }
        self.post
            .forward(params, &cache.pooled, batch, &mut cache.post)?;
        cache.output.clear();
        cache
            .output
            .extend(cache.post.output().iter().map(|&v| elu(v)));
        Ok(&cache.output)
    }

    pub fn backward(&self, params: &[f64], cache: &PointEncoderCache, dy: &[f64], grads: &mut [f64]) {
        let (batch, points) = (cache.batch, cache.points);
        let rows = batch * points;
        let c2 = self.spec.point_layers[1];
        let d_post: Vec<f64> = dy
            .iter()
            .zip(&cache.output)
            .map(|(d, y)| d * elu_grad_from_output(*y))
            .collect();
        let d_pooled = self
            .post
            .backward(params, &cache.post, &d_post, grads, true)
            .expect("input gradient requested");

        let mut d_h2 = vec![0.0; rows * c2];
        let inv = 1.0 / points as f64;
        for b in 0..batch {
            let dp = &d_pooled[b * 2 * c2..(b + 1) * 2 * c2];
            let (dmax, dmean) = dp.split_at(c2);
            let block = &mut d_h2[b * points * c2..(b + 1) * points * c2];
            for p in 0..points {
                let row = &mut block[p * c2..(p + 1) * c2];
                for c in 0..c2 {
                    row[c] = dmean[c] * inv;
                }
            }
            let arg = &cache.argmax[b * c2..(b + 1) * c2];
            for c in 0..c2 {
                block[arg[c] * c2 + c] += dmax[c];
            }
        }
        for (d, y) in d_h2.iter_mut().zip(&cache.h2) {
            *d *= elu_grad_from_output(*y);
        }
        let mut d_h1 = Vec::new();
        self.point2
            .backward(params, &cache.h1, &d_h2, rows, grads, Some(&mut d_h1));
        for (d, y) in d_h1.iter_mut().zip(&cache.h1) {
            *d *= elu_grad_from_output(*y);
        }
        self.point1
            .backward(params, &cache.input, &d_h1, rows, grads, None);
    }
}

/// Copies each cloud with its points sorted lexicographically, so every
/// permutation of the same cloud runs the exact same arithmetic.
fn canonical_order(clouds: &[f64], batch: usize, points: usize, out: &mut Vec<f64>) {
    out.clear();
    out.reserve(clouds.len());
    let mut order: Vec<usize> = Vec::with_capacity(points);
    for b in 0..batch {
        let cloud = &clouds[b * points * 3..(b + 1) * points * 3];
        order.clear();
        order.extend(0..points);
        order.sort_unstable_by(|&i, &j| {
            let (a, c) = (&cloud[i * 3..i * 3 + 3], &cloud[j * 3..j * 3 + 3]);
            a[0].total_cmp(&c[0])
                .then(a[1].total_cmp(&c[1]))
                .then(a[2].total_cmp(&c[2]))
        });
        for &i in &order {
            out.extend_from_slice(&cloud[i * 3..i * 3 + 3]);
        }
    }
}

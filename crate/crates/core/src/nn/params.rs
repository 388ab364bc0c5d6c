use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
}

/// One named tensor inside a flat parameter array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorDesc {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter store. The layout fully determines every tensor's shape
/// and location, which is also the on-disk order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layout: Vec<TensorDesc>,
    pub precision: Precision,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl PolicyParams {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.range()])
    }

    /// Name of the tensor that owns flat index `idx`.
    pub fn owner_of(&self, idx: usize) -> &str {
        self.layout
            .iter()
            .find(|t| t.range().contains(&idx))
            .map(|t| t.name.as_str())
            .unwrap_or("<unknown>")
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Training(format!(
                "non-finite parameter in `{}`",
                self.owner_of(i)
            ))),
            None => Ok(()),
        }
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }
}

#[derive(Default)]
pub struct ParamBuilder {
    layout: Vec<TensorDesc>,
    len: usize,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.len;
        let desc = TensorDesc {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.len += desc.len();
        self.layout.push(desc);
        offset
    }

    pub fn finish(self) -> PolicyParams {
        PolicyParams {
            data: vec![0.0; self.len],
            layout: self.layout,
            precision: Precision::F64,
        }
    }
}

/// Affine layer `y = x·W + b` with `W` stored row-major as `[fan_in][fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn alloc(builder: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = builder.alloc(format!("{name}.weight"), &[fan_in, fan_out]);
        let b = builder.alloc(format!("{name}.bias"), &[fan_out]);
        Dense {
            fan_in,
            fan_out,
            w,
            b,
        }
    }

    /// Gaussian init with std `gain/√fan_in`, zero bias.
    pub fn init(&self, params: &mut [f64], gain: f64, rng: &mut RngStream) {
        let std = gain / (self.fan_in as f64).sqrt();
        for v in &mut params[self.w..self.w + self.fan_in * self.fan_out] {
            *v = std * rng.normal();
        }
        params[self.b..self.b + self.fan_out].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64], batch: usize, y: &mut Vec<f64>) {
        let w = &params[self.w..self.w + self.fan_in * self.fan_out];
        let b = &params[self.b..self.b + self.fan_out];
        matmul_bias(x, w, b, batch, self.fan_in, self.fan_out, y);
    }

    /// Accumulates weight/bias gradients into `grads`; writes the input
    /// gradient into `dx` when requested.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        batch: usize,
        grads: &mut [f64],
        dx: Option<&mut Vec<f64>>,
    ) {
        let (fi, fo) = (self.fan_in, self.fan_out);
        {
            let gw = &mut grads[self.w..self.w + fi * fo];
            for r in 0..batch {
                let xr = &x[r * fi..(r + 1) * fi];
                let dyr = &dy[r * fo..(r + 1) * fo];
                for (k, &xk) in xr.iter().enumerate() {
                    if xk != 0.0 {
                        axpy(&mut gw[k * fo..(k + 1) * fo], xk, dyr);
                    }
                }
            }
        }
        {
            let gb = &mut grads[self.b..self.b + fo];
            for r in 0..batch {
                axpy(gb, 1.0, &dy[r * fo..(r + 1) * fo]);
            }
        }
        if let Some(dx) = dx {
            let w = &params[self.w..self.w + fi * fo];
            dx.clear();
            dx.resize(batch * fi, 0.0);
            for r in 0..batch {
                let dyr = &dy[r * fo..(r + 1) * fo];
                let dxr = &mut dx[r * fi..(r + 1) * fi];
                for (k, out) in dxr.iter_mut().enumerate() {
                    *out = dot(dyr, &w[k * fo..(k + 1) * fo]);
                }
            }
        }
    }
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed eight-lane accumulation order, so it vectorizes
/// without changing results between builds.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (ca, cb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y[batch][n] = x[batch][k]·w[k][n] + bias`, processed four rows at a time.
pub fn matmul_bias(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    k: usize,
    n: usize,
    y: &mut Vec<f64>,
) {
    y.clear();
    y.resize(batch * n, 0.0);
    let mut r = 0;
    while r + 4 <= batch {
        let (y0, rest) = y[r * n..(r + 4) * n].split_at_mut(n);
        let (y1, rest) = rest.split_at_mut(n);
        let (y2, y3) = rest.split_at_mut(n);
        y0.copy_from_slice(bias);
        y1.copy_from_slice(bias);
        y2.copy_from_slice(bias);
        y3.copy_from_slice(bias);
        let x0 = &x[r * k..(r + 1) * k];
        let x1 = &x[(r + 1) * k..(r + 2) * k];
        let x2 = &x[(r + 2) * k..(r + 3) * k];
        let x3 = &x[(r + 3) * k..(r + 4) * k];
        for kk in 0..k {
            let wr = &w[kk * n..(kk + 1) * n];
            let (a0, a1, a2, a3) = (x0[kk], x1[kk], x2[kk], x3[kk]);
            for j in 0..n {
                let wj = wr[j];
                y0[j] += a0 * wj;
                y1[j] += a1 * wj;
                y2[j] += a2 * wj;
                y3[j] += a3 * wj;
            }
        }
        r += 4;
    }
    while r < batch {
        let yr = &mut y[r * n..(r + 1) * n];
        yr.copy_from_slice(bias);
        let xr = &x[r * k..(r + 1) * k];
        for kk in 0..k {
            axpy(yr, xr[kk], &w[kk * n..(kk + 1) * n]);
        }
        r += 1;
    }
}

#[inline]
pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

/// Derivative of ELU expressed through its output.
#[inline]
pub fn elu_grad_from_output(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        y + 1.0
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    dot(grads, grads).sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

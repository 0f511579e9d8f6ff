//! Dense f32 tensor and the deterministic kernels the engine is built from.
//!
//! Every reduction runs in a fixed order. `matmul` parallelises over output
//! rows only, and each output element is accumulated serially along the inner
//! dimension, so serial and parallel runs agree bit-for-bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Work (m·k·n) above which `matmul` splits rows across the rayon pool.
const PAR_THRESHOLD: usize = 1 << 16;

/// Dense row-major f32 array with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Stack equal-length rows into an `[m × n]` matrix.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows
            .first()
            .map(Vec::len)
            .ok_or(Error::EmptyInput("from_rows"))?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![n],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a rank-2 tensor. Rank-1 tensors are treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Shape(format!("expected rank 1 or 2, got {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = *self.shape.last().unwrap_or(&0);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which GELU formula the MLP uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    GeluTanh,
    GeluErf,
}

/// `[m×k] × [k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 || b.shape.len() != 2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let row_kernel = |(i, out_row): (usize, &mut [f32])| {
        matmul_row(&a.data[i * k..(i + 1) * k], &b.data, n, out_row);
    };
    if m > 1 && m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Tensor::new(vec![m, n], out)
}

/// `out = x · W` for one row, `W` row-major `[x.len() × n]`.
#[inline]
pub(crate) fn matmul_row(x: &[f32], w: &[f32], n: usize, out: &mut [f32]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (p, &xv) in x.iter().enumerate() {
        let w_row = &w[p * n..(p + 1) * n];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += xv * wv;
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut data = x.data.clone();
    for r in 0..m {
        softmax_in_place(&mut data[r * n..(r + 1) * n]);
    }
    Tensor::new(x.shape.clone(), data)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `(x − mean) / sqrt(var + eps) ⊙ gain + bias` with population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    if x.numel() != gain.numel() || x.numel() != bias.numel() {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape.clone(),
            right: if x.numel() != gain.numel() {
                gain.shape.clone()
            } else {
                bias.shape.clone()
            },
        });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Param(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let mut out = vec![0.0; x.numel()];
    layer_norm_row(&x.data, &gain.data, &bias.data, eps, &mut out);
    Tensor::new(x.shape.clone(), out)
}

#[inline]
pub(crate) fn layer_norm_row(x: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

/// Elementwise tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_tanh)
}

/// Elementwise exact (erf) GELU.
pub fn gelu_erf(x: &Tensor) -> Tensor {
    map(x, gelu_erf_scalar)
}

fn map(x: &Tensor, f: fn(f32) -> f32) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

#[inline]
pub(crate) fn gelu_tanh(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_erf_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))) as f32
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, x: f32) -> f32 {
        match self {
            Activation::GeluTanh => gelu_tanh(x),
            Activation::GeluErf => gelu_erf_scalar(x),
        }
    }
}

/// erf via the Numerical Recipes erfc Chebyshev fit (|error| < 1.2e-7).
fn erf(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let erfc = t * poly.exp();
    if x >= 0.0 {
        1.0 - erfc
    } else {
        erfc - 1.0
    }
}

/// Cosine similarity clamped to `[-1, 1]`. Accumulates in f64.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f32> {
    if u.numel() != v.numel() {
        return Err(Error::Dimension {
            op: "cosine_similarity",
            left: u.shape.clone(),
            right: v.shape.clone(),
        });
    }
    cosine_slices(&u.data, &v.data)
}

pub(crate) fn cosine_slices(u: &[f32], v: &[f32]) -> Result<f32> {
    cosine_f64(u, v).map(|c| c as f32)
}

pub(crate) fn cosine_f64(u: &[f32], v: &[f32]) -> Result<f64> {
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine of a zero-norm vector".into(),
        ));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Columnwise mean of an `[m×n]` matrix.
pub fn mean_pool(rows: &Tensor) -> Result<Tensor> {
    let (m, n) = rows.dims2()?;
    if m == 0 {
        return Err(Error::EmptyInput("mean_pool"));
    }
    let mut acc = vec![0.0f64; n];
    for r in 0..m {
        for (a, &v) in acc.iter_mut().zip(rows.row(r)) {
            *a += v as f64;
        }
    }
    Tensor::vector(acc.into_iter().map(|s| (s / m as f64) as f32).collect())
}

pub(crate) fn l2_normalize(v: &mut [f32]) -> Result<()> {
    let norm = v
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateInput(
            "cannot normalize a zero vector".into(),
        ));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

//! Elementwise and row-wise primitives shared by the encoder layer.

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

/// Numerically stable softmax of a non-empty, finite vector.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("softmax input contains {bad}")));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked softmax used on hot paths whose inputs are already validated.
pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for x in v.iter_mut() {
        *x = fast_exp(*x - max);
    }
    let sum = lane_sum(v);
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Sum with eight independent accumulators.
#[inline]
pub(crate) fn lane_sum(v: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = v.chunks_exact(8);
    let tail: f32 = chunks.remainder().iter().sum();
    for c in chunks {
        for l in 0..8 {
            acc[l] += c[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `exp` for 32-bit inputs, branch-free so that loops over it vectorize.
///
/// Cody-Waite range reduction to `r ∈ [-ln2/2, ln2/2]` followed by a
/// degree-6 polynomial; relative error stays within a few ulp. Inputs below
/// -87 flush to zero.
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-87.0, 88.0);
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // The low mantissa bits of `shifted` hold n, so 2^n is built with integer
    // ops only (a float-to-int cast would block vectorization).
    let scale = f32::from_bits(shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23);
    p * scale
}

/// `gain ⊙ (x − mean) / sqrt(var + ε) + bias` over a single vector.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() || x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::shape(format!(
            "layer_norm lengths x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    normalize_row(x, &mut out);
    for ((o, g), b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
    Ok(out)
}

/// Writes the standardized row into `xhat`, returning 1/std.
fn normalize_row(x: &[f32], xhat: &mut [f32]) -> f32 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = ((v as f64 - mean) * inv) as f32;
    }
    inv as f32
}

/// Saved quantities for differentiating a row-wise layer norm.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Tensor2D,
    pub inv_std: Vec<f32>,
}

/// Row-wise layer norm of a matrix; gain and bias are 1×d rows.
pub(crate) fn layer_norm_rows(
    x: &Tensor2D,
    gain: &Tensor2D,
    bias: &Tensor2D,
) -> (Tensor2D, LayerNormCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Tensor2D::zeros(rows, cols);
    let mut out = Tensor2D::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let inv = normalize_row(x.row(r), xhat.row_mut(r));
        inv_std.push(inv);
        let h = xhat.row(r);
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = h[c] * gain.data()[c] + bias.data()[c];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns dx and accumulates dgain/dbias.
pub(crate) fn layer_norm_rows_backward(
    dy: &Tensor2D,
    cache: &LayerNormCache,
    gain: &Tensor2D,
    dgain: &mut Tensor2D,
    dbias: &mut Tensor2D,
) -> Tensor2D {
    let (rows, cols) = dy.shape();
    let n = cols as f32;
    let mut dx = Tensor2D::zeros(rows, cols);
    let mut dxhat = vec![0.0f32; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let h = cache.xhat.row(r);
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_h = 0.0f32;
        for c in 0..cols {
            dgain.data_mut()[c] += dyr[c] * h[c];
            dbias.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * gain.data()[c];
            sum_dxhat += dxhat[c];
            sum_dxhat_h += dxhat[c] * h[c];
        }
        let scale = cache.inv_std[r] / n;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = scale * (n * dxhat[c] - sum_dxhat - h[c] * sum_dxhat_h);
        }
    }
    dx
}

/// `tanh` through [`fast_exp`]; absolute error below 1e-6.
#[inline]
fn fast_tanh(y: f32) -> f32 {
    1.0 - 2.0 / (fast_exp(2.0 * y) + 1.0)
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
pub(crate) fn gelu_derivative(x: f32) -> f32 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

//! Cross-entropy against the gold candidate, regularized by the KL
//! divergence from the reranker's distribution to the retriever's.

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// `λ1 · ce + λ2 · kl`
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    /// Gradient of `loss` with respect to the raw reranker scores.
    pub d_scores: Vec<f32>,
}

fn log_softmax(v: &[f32]) -> Vec<f64> {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = v.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    v.iter().map(|&x| x as f64 - lse).collect()
}

/// `L = −λ1·log p_gold + λ2·Σᵢ pᵢ·log(pᵢ/rᵢ)` with `p = softmax(scores)`,
/// `r = softmax(retriever_scores)`.
///
/// The cross-entropy uses the exact log-softmax. Inside the KL term both
/// logarithms are floored at `ln LOG_FLOOR`, and the returned gradient is the
/// exact derivative of the floored expression.
pub fn compute_loss(
    scores: &[f32],
    gold: usize,
    retriever_scores: &[f32],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossOutput> {
    let k = scores.len();
    if k == 0 || retriever_scores.len() != k {
        return Err(Error::shape(format!(
            "{k} scores vs {} retriever scores",
            retriever_scores.len()
        )));
    }
    if gold >= k {
        return Err(Error::InvalidIndex { index: gold, len: k });
    }
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::config("loss weights must be nonnegative"));
    }
    if scores.iter().chain(retriever_scores).any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in loss".into()));
    }
    let floor = LOG_FLOOR.ln();
    let log_p = log_softmax(scores);
    let log_r = log_softmax(retriever_scores);
    let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let ce = -log_p[gold];
    // a_i = max(log p_i, floor) − max(log r_i, floor); live_i marks an unfloored log p_i.
    let ratio: Vec<f64> = log_p
        .iter()
        .zip(&log_r)
        .map(|(a, b)| a.max(floor) - b.max(floor))
        .collect();
    let live: Vec<f64> = log_p.iter().map(|&l| if l >= floor { 1.0 } else { 0.0 }).collect();
    let kl: f64 = p.iter().zip(&ratio).map(|(pi, ai)| pi * ai).sum();
    let live_mass: f64 = p.iter().zip(&live).map(|(pi, m)| pi * m).sum();
    // d ce / d s_j = p_j − y_j
    // d kl / d s_j = p_j (a_j − kl) + p_j (live_j − Σ p_i live_i)
    let d_scores = (0..k)
        .map(|j| {
            let y = if j == gold { 1.0 } else { 0.0 };
            let d_kl = p[j] * (ratio[j] - kl) + p[j] * (live[j] - live_mass);
            (lambda1 * (p[j] - y) + lambda2 * d_kl) as f32
        })
        .collect();
    Ok(LossOutput {
        loss: lambda1 * ce + lambda2 * kl,
        ce,
        kl,
        d_scores,
    })
}

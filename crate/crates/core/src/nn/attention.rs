//! Scaled dot-product attention over all rows, unmasked and without any
//! positional signal.

use super::ops::fast_exp;
use super::tensor::{axpy, dot, Tensor2D};
use crate::error::{Error, Result};

/// Query rows handled together.
const ROW_TILE: usize = 4;
/// Columns per register block in the score and value micro-kernels.
const LANES: usize = 8;

/// Per-head attention probabilities, each L×L, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionProbs(pub Vec<Tensor2D>);

/// One head's keys regrouped into blocks of LANES rows: block `b` holds
/// `head_dim` groups of LANES values, key `b·LANES + c` at offset
/// `t·LANES + c`. The last block is zero-padded.
fn key_blocks(k: &Tensor2D, head: usize, head_dim: usize) -> Vec<f32> {
    let l = k.rows();
    let mut out = vec![0.0f32; l.div_ceil(LANES) * head_dim * LANES];
    for j in 0..l {
        let row = &k.row(j)[head * head_dim..(head + 1) * head_dim];
        let block = &mut out[(j / LANES) * head_dim * LANES..];
        for (t, &x) in row.iter().enumerate() {
            block[t * LANES + j % LANES] = x;
        }
    }
    out
}

/// Attention of projected `q`, `k`, `v` (each L×d) split into `heads`.
///
/// When `keep` is provided the per-head probability matrices are stored in
/// it; otherwise memory stays O(L·d) so very long sequences fit.
pub(crate) fn attend(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    heads: usize,
    keep: Option<&mut AttentionProbs>,
) -> Result<Tensor2D> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was just detected.
        return Ok(unsafe { attend_avx2(q, k, v, heads, keep) });
    }
    Ok(attend_kernel(q, k, v, heads, keep))
}

/// Same kernel compiled for 256-bit lanes. No fused multiply-add is enabled,
/// so results are bit-identical to the portable build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attend_avx2(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    heads: usize,
    keep: Option<&mut AttentionProbs>,
) -> Tensor2D {
    attend_kernel(q, k, v, heads, keep)
}

#[inline(always)]
#[allow(clippy::needless_range_loop)]
fn attend_kernel(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    heads: usize,
    mut keep: Option<&mut AttentionProbs>,
) -> Tensor2D {
    let (l, d) = q.shape();
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut out = Tensor2D::zeros(l, d);
    if let Some(store) = keep.as_deref_mut() {
        store.0 = (0..heads).map(|_| Tensor2D::zeros(l, l)).collect();
    }
    // Query rows are processed ROW_TILE at a time, so only ROW_TILE × L
    // probabilities are live and memory stays O(L·d) without `keep`.
    // Every output element is summed in a fixed order that does not depend
    // on where a key sits in the sequence. Sums over keys run in 64 bits,
    // so reordering the sequence leaves the outputs unchanged in practice.
    let mut probs = vec![0.0f32; ROW_TILE * l];
    let mut qt = vec![0.0f32; head_dim * ROW_TILE];
    // Values of one head widened to 64 bits, rows padded to whole LANES.
    let padded = head_dim.next_multiple_of(LANES);
    let mut v64 = vec![0.0f64; l * padded];
    let mut p64 = vec![0.0f64; l * ROW_TILE];
    for h in 0..heads {
        let kb = key_blocks(k, h, head_dim);
        let cols = h * head_dim..(h + 1) * head_dim;
        for j in 0..l {
            for (w, &x) in v64[j * padded..].iter_mut().zip(&v.row(j)[cols.clone()]) {
                *w = x as f64;
            }
        }
        for i0 in (0..l).step_by(ROW_TILE) {
            let rows = ROW_TILE.min(l - i0);
            for r in 0..rows {
                for (t, &x) in q.row(i0 + r)[cols.clone()].iter().enumerate() {
                    qt[t * ROW_TILE + r] = x * scale;
                }
            }
            scores_block(&qt, &kb, l, rows, &mut probs);
            for row in probs[..rows * l].chunks_exact_mut(l) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                for s in row.iter_mut() {
                    *s = fast_exp(*s - max);
                }
                let inv = (1.0 / wide_sum(row)) as f32;
                for s in row.iter_mut() {
                    *s *= inv;
                }
            }
            for r in 0..ROW_TILE {
                for j in 0..l {
                    p64[j * ROW_TILE + r] = probs[r * l + j] as f64;
                }
            }
            for t0 in (0..head_dim).step_by(LANES) {
                let width = LANES.min(head_dim - t0);
                let mut acc = [[0.0f64; LANES]; ROW_TILE];
                for j in 0..l {
                    let at = j * padded + t0;
                    let vb: [f64; LANES] = v64[at..at + LANES].try_into().unwrap();
                    let pj: [f64; ROW_TILE] = p64[j * ROW_TILE..(j + 1) * ROW_TILE].try_into().unwrap();
                    for r in 0..ROW_TILE {
                        for c in 0..LANES {
                            acc[r][c] += pj[r] * vb[c];
                        }
                    }
                }
                for r in 0..rows {
                    let c0 = cols.start + t0;
                    let orow = &mut out.row_mut(i0 + r)[c0..c0 + width];
                    for (o, &a) in orow.iter_mut().zip(&acc[r]) {
                        *o = a as f32;
                    }
                }
            }
            if let Some(store) = keep.as_deref_mut() {
                for r in 0..rows {
                    store.0[h].row_mut(i0 + r).copy_from_slice(&probs[r * l..(r + 1) * l]);
                }
            }
        }
    }
    out
}

/// Scaled scores of `rows` query rows against every key, written into
/// `probs` (rows × l). `qt` holds the scaled queries transposed
/// (head_dim × ROW_TILE) and `kb` the keys from [`key_blocks`]. Query slots
/// past `rows` may be stale; their scores are computed and ignored.
#[inline(always)]
fn scores_block(qt: &[f32], kb: &[f32], l: usize, rows: usize, probs: &mut [f32]) {
    let head_dim = qt.len() / ROW_TILE;
    let stride = head_dim * LANES;
    for b in 0..kb.len() / stride {
        let mut s = [[0.0f32; LANES]; ROW_TILE];
        for t in 0..head_dim {
            let at = b * stride + t * LANES;
            let kv: [f32; LANES] = kb[at..at + LANES].try_into().unwrap();
            let qv: [f32; ROW_TILE] = qt[t * ROW_TILE..(t + 1) * ROW_TILE].try_into().unwrap();
            for r in 0..ROW_TILE {
                for c in 0..LANES {
                    s[r][c] += qv[r] * kv[c];
                }
            }
        }
        let j0 = b * LANES;
        let width = LANES.min(l - j0);
        for r in 0..rows {
            probs[r * l + j0..r * l + j0 + width].copy_from_slice(&s[r][..width]);
        }
    }
}

/// Sum in 64 bits with four partial accumulators.
#[inline(always)]
fn wide_sum(x: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks = x.chunks_exact(4);
    for c in &mut chunks {
        for i in 0..4 {
            acc[i] += c[i] as f64;
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|&v| v as f64).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Gradients of the attention output with respect to q, k and v.
pub(crate) fn attend_backward(
    d_out: &Tensor2D,
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    probs: &AttentionProbs,
) -> (Tensor2D, Tensor2D, Tensor2D) {
    let (l, d) = q.shape();
    let heads = probs.0.len();
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut dq = Tensor2D::zeros(l, d);
    let mut dk = Tensor2D::zeros(l, d);
    let mut dv = Tensor2D::zeros(l, d);
    let cols = |h: usize| h * head_dim..(h + 1) * head_dim;
    let mut dp = vec![0.0f32; l];
    for (h, p) in probs.0.iter().enumerate() {
        for i in 0..l {
            let doi = &d_out.row(i)[cols(h)];
            let pi = p.row(i);
            // dP_ij = dO_i · V_j
            for (j, dpj) in dp.iter_mut().enumerate() {
                *dpj = dot(doi, &v.row(j)[cols(h)]);
            }
            // dV_j += P_ij dO_i
            for (j, &pij) in pi.iter().enumerate() {
                axpy(pij, doi, &mut dv.row_mut(j)[cols(h)]);
            }
            let row_dot: f32 = dot(pi, &dp);
            // dS_ij = P_ij (dP_ij − Σ_k P_ik dP_ik), S = scale · Q Kᵀ
            let qi: Vec<f32> = q.row(i)[cols(h)].to_vec();
            for j in 0..l {
                let ds = pi[j] * (dp[j] - row_dot) * scale;
                if ds != 0.0 {
                    axpy(ds, &k.row(j)[cols(h)], &mut dq.row_mut(i)[cols(h)]);
                    axpy(ds, &qi, &mut dk.row_mut(j)[cols(h)]);
                }
            }
        }
    }
    (dq, dk, dv)
}

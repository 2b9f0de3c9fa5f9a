//! Hard-negative selection from the first-stage retriever's pool.
//!
//! A fixed share of the negatives is the top of the pool; the rest are drawn
//! without replacement with probability proportional to `exp(score)`,
//! renormalized over what is left after every draw.

use rand::Rng;

use crate::error::{Error, Result};
use crate::index::RankedList;
use crate::Id;

/// How many negatives to pick and how many of them are fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeSampling {
    /// Candidates per training list, gold included.
    pub k_train: usize,
    /// Share of the `k_train − 1` negatives taken from the top of the pool.
    pub fixed_fraction: f64,
}

impl NegativeSampling {
    pub fn negatives(&self) -> usize {
        self.k_train.saturating_sub(1)
    }

    pub fn fixed_count(&self) -> usize {
        (self.fixed_fraction * self.negatives() as f64).floor() as usize
    }
}

/// Picks `k_train − 1` negative ids from `pool`, never returning `gold`.
pub fn sample_negatives<R: Rng + ?Sized>(
    pool: &RankedList,
    gold: Id,
    cfg: &NegativeSampling,
    rng: &mut R,
) -> Result<Vec<Id>> {
    if !(0.0..=1.0).contains(&cfg.fixed_fraction) {
        return Err(Error::config("fixed_fraction must lie in [0, 1]"));
    }
    let needed = cfg.negatives();
    let candidates: Vec<(Id, f32)> = pool
        .entries()
        .iter()
        .copied()
        .filter(|&(id, _)| id != gold)
        .collect();
    if candidates.len() < needed {
        return Err(Error::PoolTooSmall {
            available: candidates.len(),
            needed,
        });
    }
    let fixed = cfg.fixed_count().min(needed);
    let mut out: Vec<Id> = candidates[..fixed].iter().map(|e| e.0).collect();
    let rest = &candidates[fixed..];
    let max = rest.iter().map(|e| e.1).fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut weights: Vec<f64> = rest.iter().map(|e| (e.1 as f64 - max).exp()).collect();
    let mut remaining: f64 = weights.iter().sum();
    for _ in fixed..needed {
        let mut target = rng.random::<f64>() * remaining;
        let mut pick = None;
        for (i, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            pick = Some(i);
            if target < *w {
                break;
            }
            target -= w;
        }
        let i = pick.expect("pool holds enough unsampled candidates");
        out.push(rest[i].0);
        remaining -= weights[i];
        weights[i] = 0.0;
        // refresh the running total so rounding does not accumulate
        if remaining <= 0.0 || out.len().is_multiple_of(32) {
            remaining = weights.iter().sum();
        }
    }
    Ok(out)
}

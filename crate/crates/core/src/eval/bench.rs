use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cmc::{cmc_forward, cmc_score, CmcParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub median_us: f64,
    pub p95_us: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Candidate counts that could not be run, with the reason.
    pub failures: Vec<(usize, String)>,
}

impl BenchReport {
    /// `k,median_us,p95_us,status` with a header row, in K order.
    pub fn to_csv(&self) -> String {
        let mut lines: Vec<(usize, String)> = self
            .rows
            .iter()
            .map(|r| (r.k, format!("{},{:.1},{:.1},ok", r.k, r.median_us, r.p95_us)))
            .chain(
                self.failures
                    .iter()
                    .map(|(k, why)| (*k, format!("{k},,,failed: {}", why.replace([',', '\n'], " ")))),
            )
            .collect();
        lines.sort_by_key(|l| l.0);
        let mut out = String::from("k,median_us,p95_us,status\n");
        for (_, l) in lines {
            let _ = writeln!(out, "{l}");
        }
        out
    }

    pub fn medians_nondecreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].median_us <= w[1].median_us)
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Rough peak working set of one forward pass, in bytes.
fn forward_bytes(k: usize, dim: usize, ffn: usize) -> usize {
    (k + 1) * (12 * dim + 2 * ffn) * 4
}

/// Times one forward pass plus scoring at each candidate count in `ks`.
///
/// Each K gets one untimed warm-up run followed by `repeats` timed runs over
/// the same random inputs. The timed region runs on the calling thread only.
pub fn bench_latency(
    params: &CmcParams,
    ks: &[usize],
    model_dim: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats < 5 {
        return Err(Error::config("need at least 5 repeats"));
    }
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("K values must be positive and strictly increasing"));
    }
    if model_dim != params.model_dim() {
        return Err(Error::config(format!(
            "model_dim {model_dim} does not match parameters of dim {}",
            params.model_dim()
        )));
    }
    let ffn = params.config().ffn_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BenchReport::default();
    for &k in ks {
        let mut probe: Vec<u8> = Vec::new();
        if let Err(e) = probe.try_reserve_exact(forward_bytes(k, model_dim, ffn)) {
            report.failures.push((k, format!("out of memory: {e}")));
            continue;
        }
        drop(probe);
        let mut vector = || -> Vec<f32> { (0..model_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
        let query = vector();
        let candidates: Vec<Vec<f32>> = (0..k).map(|_| vector()).collect();
        let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<Vec<f64>> {
            let run = || -> Result<()> {
                let ctx = cmc_forward(params, &query, &candidates)?;
                std::hint::black_box(cmc_score(&ctx)?);
                Ok(())
            };
            run()?;
            let mut samples = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                run()?;
                samples.push(t.elapsed().as_secs_f64() * 1e6);
            }
            Ok(samples)
        }));
        match outcome {
            Ok(Ok(mut samples)) => {
                samples.sort_by(f64::total_cmp);
                report.rows.push(BenchRow {
                    k,
                    median_us: percentile(&samples, 0.5),
                    p95_us: percentile(&samples, 0.95),
                });
            }
            Ok(Err(e)) => report.failures.push((k, e.to_string())),
            Err(_) => report.failures.push((k, "forward pass panicked".into())),
        }
    }
    Ok(report)
}

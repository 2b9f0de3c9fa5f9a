#![allow(dead_code)]

use cmc_core::cmc::{cmc_forward, cmc_score, CmcConfig, CmcParams, Tape};
use cmc_core::nn::{compare_gradients, GradCheckReport, ParamBuffers, Tensor2D};
use cmc_core::training::compute_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_RTOL: f32 = 1e-2;
pub const GRAD_ATOL: f32 = 1e-4;

pub fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// A random loss instance: parameters, query, candidates, gold, retriever scores.
pub struct LossInstance {
    pub params: CmcParams,
    pub query: Vec<f32>,
    pub candidates: Vec<Vec<f32>>,
    pub gold: usize,
    pub retriever: Vec<f32>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossInstance {
    pub fn random(seed: u64, dim: usize, heads: usize, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = CmcParams::init(&CmcConfig::with_dim(dim, heads), &mut rng).unwrap();
        LossInstance {
            params,
            query: rand_vec(&mut rng, dim),
            candidates: (0..k).map(|_| rand_vec(&mut rng, dim)).collect(),
            gold: rng.random_range(0..k),
            retriever: rand_vec(&mut rng, k).into_iter().map(|x| 2.0 * x).collect(),
            lambda1: rng.random_range(0.1..1.0),
            lambda2: rng.random_range(0.1..1.0),
        }
    }

    pub fn loss_with(&self, params: &CmcParams, query: &[f32], candidates: &[Vec<f32>]) -> f64 {
        let ctx = cmc_forward(params, query, candidates).unwrap();
        let s = cmc_score(&ctx).unwrap();
        compute_loss(&s.scores, self.gold, &self.retriever, self.lambda1, self.lambda2)
            .unwrap()
            .loss
    }

    /// Analytic (32-bit) gradients of parameters and inputs against central
    /// differences of the 64-bit reference model.
    pub fn check(&self) -> GradCheckReport {
        let mut tape = Tape::new();
        let s = tape.forward(&self.params, &self.query, &self.candidates).unwrap();
        let out = compute_loss(&s.scores, self.gold, &self.retriever, self.lambda1, self.lambda2).unwrap();
        let grads = tape.backward(&self.params, &out.d_scores).unwrap();

        let reference = RefModel::from_params(&self.params);
        let q: Vec<f64> = self.query.iter().map(|&x| x as f64).collect();
        let c: Vec<Vec<f64>> = self
            .candidates
            .iter()
            .map(|v| v.iter().map(|&x| x as f64).collect())
            .collect();
        let loss = |m: &RefModel, q: &[f64], c: &[Vec<f64>]| {
            ref_loss(&m.scores(q, c), self.gold, &self.retriever, self.lambda1, self.lambda2)
        };
        let central = |plus: f64, minus: f64| ((plus - minus) / (2.0 * REF_STEP)) as f32;

        let mut numeric = Vec::new();
        let mut probe = reference.clone();
        for b in 0..probe.buffers.len() {
            for i in 0..probe.buffers[b].len() {
                let orig = probe.buffers[b][i];
                probe.buffers[b][i] = orig + REF_STEP;
                let plus = loss(&probe, &q, &c);
                probe.buffers[b][i] = orig - REF_STEP;
                let minus = loss(&probe, &q, &c);
                probe.buffers[b][i] = orig;
                numeric.push(central(plus, minus));
            }
        }
        let mut report = compare_gradients(&grads.params.flatten(), &numeric, GRAD_RTOL, GRAD_ATOL);

        let mut num_q = Vec::new();
        for i in 0..q.len() {
            let (mut plus, mut minus) = (q.clone(), q.clone());
            plus[i] += REF_STEP;
            minus[i] -= REF_STEP;
            num_q.push(central(loss(&reference, &plus, &c), loss(&reference, &minus, &c)));
        }
        report.merge(&compare_gradients(&grads.d_query, &num_q, GRAD_RTOL, GRAD_ATOL));

        let mut num_c = Vec::new();
        for j in 0..c.len() {
            for i in 0..q.len() {
                let (mut plus, mut minus) = (c.clone(), c.clone());
                plus[j][i] += REF_STEP;
                minus[j][i] -= REF_STEP;
                num_c.push(central(loss(&reference, &q, &plus), loss(&reference, &q, &minus)));
            }
        }
        report.merge(&compare_gradients(grads.d_candidates.data(), &num_c, GRAD_RTOL, GRAD_ATOL));
        report
    }
}

pub const REF_STEP: f64 = 1e-5;

/// Straightforward 64-bit re-implementation of the reranker, used as an
/// independent oracle. Buffers follow the parameter order of `CmcParams`.
#[derive(Clone)]
pub struct RefModel {
    pub buffers: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
    heads: usize,
    layers: usize,
    skip: bool,
}

const PER_LAYER: usize = 16;

fn ref_linear(x: &[Vec<f64>], w: &[f64], b: &[f64], cols: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..cols)
                .map(|c| b[c] + row.iter().enumerate().map(|(r, v)| v * w[r * cols + c]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ref_layer_norm(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

impl RefModel {
    pub fn from_params(p: &CmcParams) -> Self {
        let bufs = p.buffers();
        RefModel {
            buffers: bufs.iter().map(|(_, t)| t.data().iter().map(|&x| x as f64).collect()).collect(),
            shapes: bufs.iter().map(|(_, t)| t.shape()).collect(),
            heads: p.config().heads,
            layers: p.layers.len(),
            skip: p.extra_skip,
        }
    }

    fn layer(&self, l: usize, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let buf = |i: usize| &self.buffers[l * PER_LAYER + i][..];
        let d = x[0].len();
        let ffn = self.shapes[l * PER_LAYER + 8].1;
        let q = ref_linear(x, buf(0), buf(1), d);
        let k = ref_linear(x, buf(2), buf(3), d);
        let v = ref_linear(x, buf(4), buf(5), d);
        let dh = d / self.heads;
        let n = x.len();
        let mut o = vec![vec![0.0; d]; n];
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    o[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        let a = ref_linear(&o, buf(6), buf(7), d);
        let h1 = ref_layer_norm(&add(x, &a), buf(12), buf(13));
        let g: Vec<Vec<f64>> = ref_linear(&h1, buf(8), buf(9), ffn)
            .into_iter()
            .map(|r| r.into_iter().map(ref_gelu).collect())
            .collect();
        let f = ref_linear(&g, buf(10), buf(11), d);
        ref_layer_norm(&add(&h1, &f), buf(14), buf(15))
    }

    /// Reranker scores of each candidate.
    pub fn scores(&self, query: &[f64], candidates: &[Vec<f64>]) -> Vec<f64> {
        let mut x: Vec<Vec<f64>> = std::iter::once(query.to_vec()).chain(candidates.iter().cloned()).collect();
        for l in 0..self.layers {
            let y = self.layer(l, &x);
            x = if self.skip { add(&x, &y) } else { y };
        }
        (1..x.len()).map(|j| x[0].iter().zip(&x[j]).map(|(a, b)| a * b).sum()).collect()
    }
}

/// 64-bit loss with the same flooring rules as the library.
pub fn ref_loss(scores: &[f64], gold: usize, retriever: &[f32], l1: f64, l2: f64) -> f64 {
    let log_softmax = |v: &[f64]| -> Vec<f64> {
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        v.iter().map(|x| x - lse).collect()
    };
    let floor = 1e-12f64.ln();
    let lp = log_softmax(scores);
    let lr = log_softmax(&retriever.iter().map(|&x| x as f64).collect::<Vec<_>>());
    let kl: f64 = lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a.max(floor) - b.max(floor))).sum();
    -l1 * lp[gold] + l2 * kl
}

/// Runs the gradient check on `count` random instances of the acceptance
/// size (dim 8, K = 4, two layers, two heads).
pub fn gradient_suite(count: u64) -> GradCheckReport {
    let mut total = GradCheckReport::default();
    for seed in 0..count {
        total.merge(&LossInstance::random(1000 + seed, 8, 2, 4).check());
    }
    total
}

pub fn tensor_close(a: &Tensor2D, b: &Tensor2D, tol: f32) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol
}

/// Training setup used for the end-to-end synthetic experiment.
pub fn experiment_config(seed: u64) -> cmc_core::training::TrainingConfig {
    cmc_core::training::TrainingConfig {
        k_train: 16,
        epochs: 3,
        negative_pool_size: 64,
        base_lr: 1e-2,
        seed,
        ..Default::default()
    }
}

/// A task small enough for quick pipeline tests.
pub fn small_task(seed: u64) -> cmc_core::eval::SyntheticTask {
    let spec = cmc_core::eval::SyntheticTaskSpec {
        n_candidates: 400,
        surface_dim: 12,
        latent_dim: 4,
        confusables: 4,
        train_queries: 120,
        test_queries: 40,
        seed,
        ..Default::default()
    };
    cmc_core::eval::generate_synthetic(&spec).unwrap()
}

/// Freshly initialized reranker parameters sized for `task`.
pub fn params_for(task: &cmc_core::eval::SyntheticTask, seed: u64) -> CmcParams {
    let heads = if task.model_dim().is_multiple_of(4) { 4 } else { 2 };
    CmcParams::init(&CmcConfig::with_dim(task.model_dim(), heads), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

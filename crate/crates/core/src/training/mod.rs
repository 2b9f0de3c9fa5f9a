//! Training the reranker: loss, negative sampling and the epoch loop.

mod loss;
mod sampling;

pub use loss::{compute_loss, LossOutput, LOG_FLOOR};
pub use sampling::{sample_negatives, NegativeSampling};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cmc::{CandidateStore, CmcParams, Tape};
use crate::error::{Error, Result};
use crate::index::CandidateIndex;
use crate::nn::{adamw_step, GradientSet, LrSchedule, OptimizerState, Tensor2D};
use crate::Id;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Candidates per training list: the gold plus `k_train − 1` negatives.
    pub k_train: usize,
    pub fixed_fraction: f64,
    /// How many retriever results negatives are drawn from.
    pub negative_pool_size: usize,
    pub base_lr: f32,
    pub weight_decay: f32,
    pub warmup_fraction: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// When set, a checkpoint `epoch{n}.cmcp` is written here after each epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda1: 0.5,
            lambda2: 0.5,
            k_train: 64,
            fixed_fraction: 0.5,
            negative_pool_size: 1024,
            base_lr: 1e-5,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            batch_size: 4,
            epochs: 5,
            seed: crate::DEFAULT_SEED,
            checkpoint_dir: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::config("need lambda1, lambda2 >= 0 with a positive sum"));
        }
        if self.k_train < 2 {
            return Err(Error::config("k_train must be at least 2"));
        }
        if self.k_train > self.negative_pool_size + 1 {
            return Err(Error::config(format!(
                "k_train {} exceeds negative pool {} + 1",
                self.k_train, self.negative_pool_size
            )));
        }
        if !(0.0..=1.0).contains(&self.fixed_fraction) {
            return Err(Error::config("fixed_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if self.base_lr.is_nan() || self.base_lr < 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("learning rate and weight decay must be nonnegative"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("{key}: cannot parse {value:?}"));
        match key {
            "lambda1" => self.lambda1 = value.parse().map_err(|_| bad())?,
            "lambda2" => self.lambda2 = value.parse().map_err(|_| bad())?,
            "k_train" => self.k_train = value.parse().map_err(|_| bad())?,
            "fixed_fraction" => self.fixed_fraction = value.parse().map_err(|_| bad())?,
            "negative_pool_size" => self.negative_pool_size = value.parse().map_err(|_| bad())?,
            "base_lr" | "lr" => self.base_lr = value.parse().map_err(|_| bad())?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad())?,
            "warmup_fraction" => self.warmup_fraction = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "checkpoint_dir" => {
                self.checkpoint_dir = match value {
                    "" | "none" => None,
                    dir => Some(PathBuf::from(dir)),
                }
            }
            other => return Err(Error::config(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let dir = self
            .checkpoint_dir
            .as_ref()
            .map_or_else(|| "none".to_string(), |d| d.display().to_string());
        format!(
            "lambda1 = {}\nlambda2 = {}\nk_train = {}\nfixed_fraction = {}\nnegative_pool_size = {}\n\
             base_lr = {}\nweight_decay = {}\nwarmup_fraction = {}\nbatch_size = {}\nepochs = {}\n\
             seed = {}\ncheckpoint_dir = {dir}\n",
            self.lambda1,
            self.lambda2,
            self.k_train,
            self.fixed_fraction,
            self.negative_pool_size,
            self.base_lr,
            self.weight_decay,
            self.warmup_fraction,
            self.batch_size,
            self.epochs,
            self.seed
        )
    }

    pub fn sampling(&self) -> NegativeSampling {
        NegativeSampling {
            k_train: self.k_train,
            fixed_fraction: self.fixed_fraction,
        }
    }

    pub fn total_steps(&self, examples: usize) -> u64 {
        (self.epochs * examples.div_ceil(self.batch_size)) as u64
    }
}

/// One supervised query.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub query_id: Id,
    /// Query vector in the first-stage retriever's space.
    pub retriever_query: Vec<f32>,
    /// Query vector fed to the reranker.
    pub cmc_query: Vec<f32>,
    pub gold: Id,
}

/// Queries plus the retriever and reranker-side candidate embeddings.
pub struct TrainingData<'a, S: CandidateStore + ?Sized> {
    pub examples: &'a [TrainingExample],
    pub retriever: &'a CandidateIndex,
    pub candidates: &'a S,
}

/// One assembled training list.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub query: Vec<f32>,
    /// `k_train` × d reranker-side embeddings.
    pub candidates: Tensor2D,
    pub candidate_ids: Vec<Id>,
    pub gold: usize,
    pub retriever_scores: Vec<f32>,
}

/// Instances consumed by one optimizer step.
pub type TrainingBatch = Vec<TrainingInstance>;

impl TrainingInstance {
    fn rows(&self) -> Vec<&[f32]> {
        (0..self.candidates.rows()).map(|r| self.candidates.row(r)).collect()
    }
}

/// Retrieves a pool for `example`, samples negatives and inserts the gold at
/// a random position.
pub fn assemble_instance<S: CandidateStore + ?Sized, R: Rng>(
    cfg: &TrainingConfig,
    example: &TrainingExample,
    data: &TrainingData<'_, S>,
    rng: &mut R,
) -> Result<TrainingInstance> {
    let pool = data
        .retriever
        .search_topk(&example.retriever_query, cfg.negative_pool_size + 1)?;
    let mut pool_entries = pool.entries().to_vec();
    pool_entries.retain(|e| e.0 != example.gold);
    pool_entries.truncate(cfg.negative_pool_size);
    let pool = crate::index::RankedList::from_unsorted(pool_entries)?;
    let mut ids = sample_negatives(&pool, example.gold, &cfg.sampling(), rng)?;
    let gold = rng.random_range(0..=ids.len());
    ids.insert(gold, example.gold);
    let mut rows = Vec::with_capacity(ids.len());
    let mut retriever_scores = Vec::with_capacity(ids.len());
    for &id in &ids {
        rows.push(
            data.candidates
                .candidate(id)
                .ok_or(Error::MissingCandidate(id))?,
        );
        retriever_scores.push(data.retriever.score(&example.retriever_query, id)?);
    }
    Ok(TrainingInstance {
        query: example.cmc_query.clone(),
        candidates: Tensor2D::from_rows(&rows)?,
        candidate_ids: ids,
        gold,
        retriever_scores,
    })
}

/// Loss and parameter gradients for a single instance.
pub fn instance_gradients(
    params: &CmcParams,
    inst: &TrainingInstance,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, GradientSet)> {
    let mut tape = Tape::new();
    let scores = tape.forward(params, &inst.query, &inst.rows())?;
    let loss = compute_loss(&scores.scores, inst.gold, &inst.retriever_scores, lambda1, lambda2)?;
    let grads = tape.backward(params, &loss.d_scores)?;
    Ok((loss.loss, grads.params))
}

/// Loss of an instance without recording gradients.
pub fn instance_loss(params: &CmcParams, inst: &TrainingInstance, lambda1: f64, lambda2: f64) -> Result<f64> {
    let ctx = crate::cmc::cmc_forward(params, &inst.query, &inst.rows())?;
    let scores = crate::cmc::cmc_score(&ctx)?;
    Ok(compute_loss(&scores.scores, inst.gold, &inst.retriever_scores, lambda1, lambda2)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
    pub steps: Vec<StepLog>,
}

impl TrainingReport {
    /// `step,epoch,lr,loss` lines with a header row.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{:e},{:.6}", s.step, s.epoch, s.lr, s.loss);
        }
        out
    }
}

/// Trains `params` in place. Fully deterministic for a given seed.
pub fn train<S: CandidateStore + Sync + ?Sized>(
    cfg: &TrainingConfig,
    data: &TrainingData<'_, S>,
    params: &mut CmcParams,
) -> Result<TrainingReport> {
    cfg.validate()?;
    params.validate()?;
    if data.examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = LrSchedule::WarmupLinearDecay {
        warmup_fraction: cfg.warmup_fraction,
        total_steps: cfg.total_steps(data.examples.len()),
    };
    let mut opt = OptimizerState::new(params, cfg.base_lr, cfg.weight_decay, schedule);
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let mut report = TrainingReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: TrainingBatch = chunk
                .iter()
                .map(|&i| assemble_instance(cfg, &data.examples[i], data, &mut rng))
                .collect::<Result<_>>()?;
            let snapshot: &CmcParams = params;
            let results: Vec<(f64, GradientSet)> = batch
                .par_iter()
                .map(|inst| instance_gradients(snapshot, inst, cfg.lambda1, cfg.lambda2))
                .collect::<Result<_>>()?;
            let mut grads = GradientSet::zeros_like(params);
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                grads.accumulate(g)?;
            }
            let n = results.len() as f64;
            grads.scale(1.0 / n as f32);
            batch_loss /= n;
            let lr = opt.effective_lr();
            adamw_step(params, &grads, &mut opt)?;
            report.steps.push(StepLog {
                step: opt.step(),
                epoch,
                lr,
                loss: batch_loss,
            });
            epoch_loss += batch_loss * n;
        }
        report.epoch_losses.push(epoch_loss / data.examples.len() as f64);
        if let Some(dir) = &cfg.checkpoint_dir {
            params
                .to_checkpoint()
                .save(&dir.join(format!("epoch{}.cmcp", epoch + 1)))?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::parse_key_values;

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainingConfig::default();
        for (k, v) in [("lr", "0.01"), ("k_train", "16"), ("checkpoint_dir", "ckpts"), ("lambda2", "0.25")] {
            cfg.set(k, v).unwrap();
        }
        let mut back = TrainingConfig::default();
        for (k, v) in parse_key_values(&cfg.to_text()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(cfg.set("k_train", "many").is_err());
        assert!(cfg.set("momentum", "0.9").is_err());
    }
}

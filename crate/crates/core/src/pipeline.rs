//! Retrieve → rerank → (optional) final scorer.
//!
//! Stage 1 pulls `k_retrieve` candidates from the exact index, stage 2 lets
//! the reranker cut them to `k_prime`, and in intermediate mode a pluggable
//! final scorer picks the top-1 among the survivors. In final mode the
//! reranker's best candidate is the answer.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cmc::{rerank, CandidateStore, CmcParams};
use crate::encoders::{Encoder, EncoderInput};
use crate::error::{Error, Result};
use crate::eval::EvalRecord;
use crate::index::{CandidateIndex, RankedList};
use crate::io::parse_key_values;
use crate::Id;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// The reranker's argmax is the final answer.
    Final,
    /// The reranker narrows the pool for a heavier final scorer.
    Intermediate,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Mode::Final),
            "intermediate" => Ok(Mode::Intermediate),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

/// A query as it enters the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: Id,
    /// Input for the first-stage query encoder.
    pub retriever_input: EncoderInput,
    /// Input for the reranker's query encoder.
    pub cmc_input: EncoderInput,
    /// Known gold candidate, if any; only oracle scorers look at it.
    pub gold: Option<Id>,
}

/// Final-stage scorer over (query, candidate) pairs. Must be deterministic.
pub trait Scorer: Send + Sync {
    fn score(&self, query: &Query, candidate: Id) -> f32;

    fn name(&self) -> &str;
}

/// Scores 1 for the gold candidate and 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldOracleScorer;

impl Scorer for GoldOracleScorer {
    fn score(&self, query: &Query, candidate: Id) -> f32 {
        if query.gold == Some(candidate) {
            1.0
        } else {
            0.0
        }
    }

    fn name(&self) -> &str {
        "gold"
    }
}

/// Gold scores 1; every other pair gets seeded uniform noise in [0, 1).
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracleScorer {
    pub seed: u64,
}

impl Scorer for NoisyOracleScorer {
    fn score(&self, query: &Query, candidate: Id) -> f32 {
        if query.gold == Some(candidate) {
            return 1.0;
        }
        let key = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ query.id.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ candidate.rotate_left(31);
        ChaCha8Rng::seed_from_u64(key).random::<f32>()
    }

    fn name(&self) -> &str {
        "noisy"
    }
}

/// Builds a built-in scorer by name (`gold` or `noisy`).
pub fn scorer_by_name(name: &str, seed: u64) -> Result<Arc<dyn Scorer>> {
    match name {
        "gold" => Ok(Arc::new(GoldOracleScorer)),
        "noisy" => Ok(Arc::new(NoisyOracleScorer { seed })),
        other => Err(Error::config(format!("unknown scorer {other:?}"))),
    }
}

#[derive(Clone)]
pub struct PipelineConfig {
    pub k_retrieve: usize,
    pub k_prime: usize,
    pub mode: Mode,
    pub final_scorer: Option<Arc<dyn Scorer>>,
}

impl std::fmt::Debug for PipelineConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PipelineConfig")
            .field("k_retrieve", &self.k_retrieve)
            .field("k_prime", &self.k_prime)
            .field("mode", &self.mode)
            .field("final_scorer", &self.final_scorer.as_ref().map(|s| s.name().to_string()))
            .finish()
    }
}

impl PipelineConfig {
    pub fn final_mode(k_retrieve: usize, k_prime: usize) -> Self {
        PipelineConfig {
            k_retrieve,
            k_prime,
            mode: Mode::Final,
            final_scorer: None,
        }
    }

    pub fn intermediate(k_retrieve: usize, k_prime: usize, scorer: Arc<dyn Scorer>) -> Self {
        PipelineConfig {
            k_retrieve,
            k_prime,
            mode: Mode::Intermediate,
            final_scorer: Some(scorer),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_prime == 0 || self.k_prime > self.k_retrieve {
            return Err(Error::config(format!(
                "need 0 < k_prime ({}) <= k_retrieve ({})",
                self.k_prime, self.k_retrieve
            )));
        }
        if self.mode == Mode::Intermediate && self.final_scorer.is_none() {
            return Err(Error::config("intermediate mode requires a final scorer"));
        }
        Ok(())
    }
}

/// Plain-value form of the pipeline config file keys:
/// `k_retrieve`, `k_prime`, `mode`, `scorer`, `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub k_retrieve: usize,
    pub k_prime: usize,
    pub mode: Mode,
    pub scorer: Option<String>,
    pub seed: u64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            k_retrieve: 64,
            k_prime: 16,
            mode: Mode::Final,
            scorer: None,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl PipelineSettings {
    /// Applies one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::config(format!("{key}: {v:?} is not an unsigned integer")))
        };
        match key {
            "k_retrieve" => self.k_retrieve = num(value)? as usize,
            "k_prime" => self.k_prime = num(value)? as usize,
            "mode" => self.mode = value.parse()?,
            "scorer" => {
                self.scorer = match value {
                    "" | "none" => None,
                    s => Some(s.to_string()),
                }
            }
            "seed" => self.seed = num(value)?,
            other => return Err(Error::config(format!("unknown pipeline key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in parse_key_values(text)? {
            s.set(&k, &v)?;
        }
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mode = match self.mode {
            Mode::Final => "final",
            Mode::Intermediate => "intermediate",
        };
        format!(
            "k_retrieve = {}\nk_prime = {}\nmode = {mode}\nscorer = {}\nseed = {}\n",
            self.k_retrieve,
            self.k_prime,
            self.scorer.as_deref().unwrap_or("none"),
            self.seed
        )
    }

    pub fn to_config(&self) -> Result<PipelineConfig> {
        let final_scorer = self
            .scorer
            .as_deref()
            .map(|name| scorer_by_name(name, self.seed))
            .transpose()?;
        let cfg = PipelineConfig {
            k_retrieve: self.k_retrieve,
            k_prime: self.k_prime,
            mode: self.mode,
            final_scorer,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    /// Both query encoders (run side by side).
    pub encode: Duration,
    pub retrieve: Duration,
    pub rerank: Duration,
    pub final_stage: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub query_id: Id,
    pub gold: Option<Id>,
    /// First-stage list, `k_retrieve` long (or the corpus size if smaller).
    pub retrieved: RankedList,
    /// Reranker survivors, `k_prime` long.
    pub reranked: RankedList,
    pub top1: Id,
    pub timings: StageTimings,
}

impl PipelineResult {
    /// Evaluation record for the reranked list.
    pub fn reranked_record(&self) -> Option<EvalRecord> {
        self.gold.map(|gold| EvalRecord {
            query_id: self.query_id,
            gold,
            ranked: self.reranked.ids(),
            gold_in_pool: self.retrieved.contains(gold),
        })
    }

    /// Evaluation record for the first-stage list.
    pub fn retrieved_record(&self) -> Option<EvalRecord> {
        self.gold.map(|gold| EvalRecord {
            query_id: self.query_id,
            gold,
            ranked: self.retrieved.ids(),
            gold_in_pool: self.retrieved.contains(gold),
        })
    }

    /// Evaluation record holding only the final top-1 answer.
    pub fn final_record(&self) -> Option<EvalRecord> {
        self.gold.map(|gold| EvalRecord {
            query_id: self.query_id,
            gold,
            ranked: vec![self.top1],
            gold_in_pool: self.retrieved.contains(gold),
        })
    }
}

/// Everything a query needs, shared immutably across worker threads.
pub struct Pipeline<'a, S: CandidateStore + Sync + ?Sized> {
    pub index: &'a CandidateIndex,
    pub retriever_encoder: &'a Encoder,
    pub cmc_encoder: &'a Encoder,
    pub params: &'a CmcParams,
    pub candidates: &'a S,
    pub config: PipelineConfig,
    /// Run the two query encoders concurrently.
    pub parallel_encode: bool,
}

/// Per-query outcomes of a batch, in input order.
#[derive(Debug)]
pub struct BatchOutput {
    pub results: Vec<PipelineResult>,
    pub errors: Vec<(Id, Error)>,
}

impl<'a, S: CandidateStore + Sync + ?Sized> Pipeline<'a, S> {
    pub fn run_query(&self, query: &Query) -> Result<PipelineResult> {
        self.config.validate()?;
        let t0 = Instant::now();
        let encode = |enc: &Encoder, input: &EncoderInput| {
            enc.encode(input).map_err(|e| match e {
                Error::Encode(_) => e,
                other => Error::Encode(other.to_string()),
            })
        };
        let (q_ret, q_cmc) = if self.parallel_encode {
            rayon::join(
                || encode(self.retriever_encoder, &query.retriever_input),
                || encode(self.cmc_encoder, &query.cmc_input),
            )
        } else {
            (
                encode(self.retriever_encoder, &query.retriever_input),
                encode(self.cmc_encoder, &query.cmc_input),
            )
        };
        let (q_ret, q_cmc) = (q_ret?, q_cmc?);
        let t1 = Instant::now();

        let retrieved = self
            .index
            .search_topk(q_ret.values(), self.config.k_retrieve)
            .map_err(|e| e.in_stage("retrieve"))?;
        let t2 = Instant::now();

        let k_out = self.config.k_prime.min(retrieved.len());
        let reranked = rerank(self.params, q_cmc.values(), &retrieved, self.candidates, k_out)
            .map_err(|e| e.in_stage("rerank"))?;
        let t3 = Instant::now();

        let top1 = match self.config.mode {
            Mode::Final => reranked.first().map(|e| e.0),
            Mode::Intermediate => {
                let scorer = self.config.final_scorer.as_ref().expect("validated");
                let scored = reranked
                    .entries()
                    .iter()
                    .map(|&(id, _)| (id, scorer.score(query, id)))
                    .collect();
                RankedList::from_unsorted(scored)
                    .map_err(|e| e.in_stage("final"))?
                    .first()
                    .map(|e| e.0)
            }
        }
        .ok_or_else(|| Error::InvalidInput("index is empty".into()).in_stage("retrieve"))?;
        let t4 = Instant::now();

        Ok(PipelineResult {
            query_id: query.id,
            gold: query.gold,
            retrieved,
            reranked,
            top1,
            timings: StageTimings {
                encode: t1 - t0,
                retrieve: t2 - t1,
                rerank: t3 - t2,
                final_stage: t4 - t3,
            },
        })
    }

    /// Runs every query independently on the current rayon pool; failures
    /// are collected rather than aborting the batch.
    pub fn run_batch(&self, queries: &[Query]) -> BatchOutput {
        let outcomes: Vec<Result<PipelineResult>> =
            queries.par_iter().map(|q| self.run_query(q)).collect();
        let mut out = BatchOutput {
            results: Vec::with_capacity(queries.len()),
            errors: Vec::new(),
        };
        for (q, r) in queries.iter().zip(outcomes) {
            match r {
                Ok(res) => out.results.push(res),
                Err(e) => out.errors.push((q.id, e)),
            }
        }
        out
    }
}

/// Line-delimited results: `query_id,top1,encode_us,retrieve_us,rerank_us,final_us`.
pub fn results_to_text(results: &[PipelineResult]) -> String {
    let mut out = String::from("query_id,top1,encode_us,retrieve_us,rerank_us,final_us\n");
    for r in results {
        let t = &r.timings;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.query_id,
            r.top1,
            t.encode.as_micros(),
            t.retrieve.as_micros(),
            t.rerank.as_micros(),
            t.final_stage.as_micros()
        );
    }
    out
}

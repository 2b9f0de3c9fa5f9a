//! A retrieval task the first stage cannot solve alone.
//!
//! Candidates come in groups of `confusables` that share one surface vector
//! and differ only in a latent vector. The retriever sees surfaces only
//! (latent half zeroed), so it can find the group but not the member. The
//! reranker-side embeddings carry both halves, and the gold is the group
//! member whose latent best matches the query latent.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::metrics::{compute_metrics, EvalRecord, MetricTable};
use crate::encoders::{read_embedding_set, save_embedding_file, Embedding, EmbeddingSet, EncoderInput};
use crate::error::{Error, Result};
use crate::index::CandidateIndex;
use crate::io::{parse_key_values, write_atomic};
use crate::pipeline::Query;
use crate::training::TrainingExample;
use crate::Id;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub n_candidates: usize,
    pub surface_dim: usize,
    pub latent_dim: usize,
    /// Standard deviation of the Gaussian noise added to the query surface.
    pub surface_noise: f32,
    /// Group size `m`; must divide `n_candidates`.
    pub confusables: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_candidates: 5000,
            surface_dim: 48,
            latent_dim: 16,
            surface_noise: 0.05,
            confusables: 8,
            train_queries: 2000,
            test_queries: 500,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn model_dim(&self) -> usize {
        self.surface_dim + self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.surface_dim == 0 || self.latent_dim == 0 {
            return Err(Error::config("surface and latent dims must be positive"));
        }
        if self.confusables < 2 {
            return Err(Error::config("need at least 2 confusables per group"));
        }
        if self.n_candidates == 0 || !self.n_candidates.is_multiple_of(self.confusables) {
            return Err(Error::config(format!(
                "corpus size {} is not a positive multiple of {}",
                self.n_candidates, self.confusables
            )));
        }
        if !(self.surface_noise >= 0.0 && self.surface_noise.is_finite()) {
            return Err(Error::config("surface noise must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("{key}: cannot parse {value:?}"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "n_candidates" | "n" => self.n_candidates = int()?,
            "surface_dim" => self.surface_dim = int()?,
            "latent_dim" => self.latent_dim = int()?,
            "surface_noise" => self.surface_noise = value.parse().map_err(|_| bad())?,
            "confusables" | "m" => self.confusables = int()?,
            "train_queries" => self.train_queries = int()?,
            "test_queries" => self.test_queries = int()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            other => return Err(Error::config(format!("unknown synthetic key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v) in parse_key_values(text)? {
            spec.set(&k, &v)?;
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_candidates = {}\nsurface_dim = {}\nlatent_dim = {}\nsurface_noise = {}\n\
             confusables = {}\ntrain_queries = {}\ntest_queries = {}\nseed = {}\n",
            self.n_candidates,
            self.surface_dim,
            self.latent_dim,
            self.surface_noise,
            self.confusables,
            self.train_queries,
            self.test_queries,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticQuery {
    pub id: Id,
    /// `[surface; 0]`
    pub retriever_query: Vec<f32>,
    /// `[surface; latent]`
    pub cmc_query: Vec<f32>,
    pub gold: Id,
}

impl SyntheticQuery {
    pub fn to_training_example(&self) -> TrainingExample {
        TrainingExample {
            query_id: self.id,
            retriever_query: self.retriever_query.clone(),
            cmc_query: self.cmc_query.clone(),
            gold: self.gold,
        }
    }

    pub fn to_pipeline_query(&self) -> Query {
        Query {
            id: self.id,
            retriever_input: EncoderInput::Raw(
                Embedding::new(self.retriever_query.clone()).expect("generated values are finite"),
            ),
            cmc_input: EncoderInput::Raw(
                Embedding::new(self.cmc_query.clone()).expect("generated values are finite"),
            ),
            gold: Some(self.gold),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub ids: Vec<Id>,
    /// What the first-stage index stores.
    pub retriever_corpus: Vec<Embedding>,
    /// What the reranker reads.
    pub cmc_corpus: Vec<Embedding>,
    pub train: Vec<SyntheticQuery>,
    pub test: Vec<SyntheticQuery>,
}

/// First-stage metrics next to what an exact dot product over the
/// reranker-side embeddings achieves on the same queries.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePair {
    pub retriever: MetricTable,
    pub oracle: MetricTable,
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn concat(a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Builds the task. Identical specs give identical tasks.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups = spec.n_candidates / spec.confusables;
    let surfaces: Vec<Vec<f32>> = (0..groups).map(|_| unit_gaussian(&mut rng, spec.surface_dim)).collect();
    let latents: Vec<Vec<f32>> = (0..spec.n_candidates)
        .map(|_| unit_gaussian(&mut rng, spec.latent_dim))
        .collect();
    let zeros = vec![0.0; spec.latent_dim];
    let ids: Vec<Id> = (0..spec.n_candidates as Id).collect();
    let mut retriever_corpus = Vec::with_capacity(spec.n_candidates);
    let mut cmc_corpus = Vec::with_capacity(spec.n_candidates);
    for (c, latent) in latents.iter().enumerate() {
        let surface = &surfaces[c / spec.confusables];
        retriever_corpus.push(Embedding::new(concat(surface, &zeros))?);
        cmc_corpus.push(Embedding::new(concat(surface, latent))?);
    }

    let make_query = |id: Id, rng: &mut ChaCha8Rng| -> SyntheticQuery {
        let g = rng.random_range(0..groups);
        let noisy: Vec<f32> = surfaces[g]
            .iter()
            .map(|&s| s + spec.surface_noise * rng.sample::<f32, _>(StandardNormal))
            .collect();
        let surface = normalize(noisy);
        let u = unit_gaussian(rng, spec.latent_dim);
        let members = g * spec.confusables..(g + 1) * spec.confusables;
        let mut gold = members.start;
        let mut best = f32::NEG_INFINITY;
        for c in members {
            let s = crate::nn::dot(&u, &latents[c]);
            if s > best {
                best = s;
                gold = c;
            }
        }
        SyntheticQuery {
            id,
            retriever_query: concat(&surface, &zeros),
            cmc_query: concat(&surface, &u),
            gold: gold as Id,
        }
    };
    let train = (0..spec.train_queries)
        .map(|q| make_query(q as Id, &mut rng))
        .collect();
    let test = (0..spec.test_queries)
        .map(|q| make_query((spec.train_queries + q) as Id, &mut rng))
        .collect();
    Ok(SyntheticTask {
        spec: spec.clone(),
        ids,
        retriever_corpus,
        cmc_corpus,
        train,
        test,
    })
}

const SPEC_FILE: &str = "spec.txt";
const CORPUS_RETRIEVER: &str = "corpus_retriever.cmce";
const CORPUS_CMC: &str = "corpus_cmc.cmce";

fn gold_text(queries: &[SyntheticQuery]) -> String {
    let mut out = String::new();
    for q in queries {
        let _ = writeln!(out, "{} {}", q.id, q.gold);
    }
    out
}

fn parse_gold(text: &str) -> Result<Vec<(Id, Id)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut it = l.split_whitespace().map(str::parse::<Id>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(q)), Some(Ok(g)), None) => Ok((q, g)),
                _ => Err(Error::format(format!("gold file line {}: expected `query_id gold_id`", i + 1))),
            }
        })
        .collect()
}

impl SyntheticTask {
    pub fn model_dim(&self) -> usize {
        self.spec.model_dim()
    }

    pub fn index(&self) -> Result<CandidateIndex> {
        CandidateIndex::build(&self.ids, &self.retriever_corpus, self.model_dim())
    }

    pub fn cmc_store(&self) -> HashMap<Id, Embedding> {
        self.ids.iter().copied().zip(self.cmc_corpus.iter().cloned()).collect()
    }

    pub fn training_examples(&self) -> Vec<TrainingExample> {
        self.train.iter().map(SyntheticQuery::to_training_example).collect()
    }

    pub fn test_queries(&self) -> Vec<Query> {
        self.test.iter().map(SyntheticQuery::to_pipeline_query).collect()
    }

    /// Retriever and oracle metrics on `queries`, each list cut at the
    /// largest of `ks`.
    pub fn baseline(&self, queries: &[SyntheticQuery], ks: &[usize]) -> Result<BaselinePair> {
        let depth = ks.iter().copied().max().unwrap_or(1);
        let retriever = self.index()?;
        let oracle = CandidateIndex::build(&self.ids, &self.cmc_corpus, self.model_dim())?;
        let mut r_records = Vec::with_capacity(queries.len());
        let mut o_records = Vec::with_capacity(queries.len());
        for q in queries {
            let r = retriever.search_topk(&q.retriever_query, depth)?.ids();
            let o = oracle.search_topk(&q.cmc_query, depth)?.ids();
            let in_pool = r.contains(&q.gold);
            r_records.push(EvalRecord { query_id: q.id, gold: q.gold, ranked: r, gold_in_pool: in_pool });
            o_records.push(EvalRecord { query_id: q.id, gold: q.gold, ranked: o, gold_in_pool: in_pool });
        }
        Ok(BaselinePair {
            retriever: compute_metrics(&r_records, ks)?,
            oracle: compute_metrics(&o_records, ks)?,
        })
    }

    /// Writes the corpus and query sets as embedding files plus
    /// `{train,test}_gold.txt` and the generating spec.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let dim = self.model_dim();
        write_atomic(&dir.join(SPEC_FILE), self.spec.to_text().as_bytes())?;
        let set = |ids: Vec<Id>, embs: Vec<Embedding>| EmbeddingSet::new(dim, ids, embs);
        save_embedding_file(&dir.join(CORPUS_RETRIEVER), &set(self.ids.clone(), self.retriever_corpus.clone())?)?;
        save_embedding_file(&dir.join(CORPUS_CMC), &set(self.ids.clone(), self.cmc_corpus.clone())?)?;
        for (name, queries) in [("train", &self.train), ("test", &self.test)] {
            let ids: Vec<Id> = queries.iter().map(|q| q.id).collect();
            let embs = |f: fn(&SyntheticQuery) -> &Vec<f32>| {
                queries
                    .iter()
                    .map(|q| Embedding::new(f(q).clone()))
                    .collect::<Result<Vec<_>>>()
            };
            save_embedding_file(
                &dir.join(format!("{name}_retriever.cmce")),
                &set(ids.clone(), embs(|q| &q.retriever_query)?)?,
            )?;
            save_embedding_file(&dir.join(format!("{name}_cmc.cmce")), &set(ids, embs(|q| &q.cmc_query)?)?)?;
            write_atomic(&dir.join(format!("{name}_gold.txt")), gold_text(queries).as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from_dir(dir: &Path) -> Result<Self> {
        let spec = SyntheticTaskSpec::from_text(&std::fs::read_to_string(dir.join(SPEC_FILE))?)?;
        let dim = spec.model_dim();
        let load = |name: &str| -> Result<EmbeddingSet> {
            let set = read_embedding_set(&dir.join(name))?;
            if set.dim != dim {
                return Err(Error::format(format!("{name}: dim {} but spec says {dim}", set.dim)));
            }
            Ok(set)
        };
        let retriever = load(CORPUS_RETRIEVER)?;
        let cmc = load(CORPUS_CMC)?;
        if retriever.ids != cmc.ids {
            return Err(Error::format("corpus files list different ids"));
        }
        let split = |name: &str| -> Result<Vec<SyntheticQuery>> {
            let r = load(&format!("{name}_retriever.cmce"))?;
            let c = load(&format!("{name}_cmc.cmce"))?;
            let gold = parse_gold(&std::fs::read_to_string(dir.join(format!("{name}_gold.txt")))?)?;
            if r.ids != c.ids || gold.len() != r.ids.len() || gold.iter().zip(&r.ids).any(|(g, id)| g.0 != *id) {
                return Err(Error::format(format!("{name} query files disagree")));
            }
            Ok(gold
                .into_iter()
                .zip(r.embeddings.into_iter().zip(c.embeddings))
                .map(|((id, gold), (re, ce))| SyntheticQuery {
                    id,
                    retriever_query: re.into_values(),
                    cmc_query: ce.into_values(),
                    gold,
                })
                .collect())
        };
        let train = split("train")?;
        let test = split("test")?;
        Ok(SyntheticTask {
            spec,
            ids: retriever.ids,
            retriever_corpus: retriever.embeddings,
            cmc_corpus: cmc.embeddings,
            train,
            test,
        })
    }
}

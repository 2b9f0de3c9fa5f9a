//! The multi-candidate reranker.
//!
//! The query embedding and K candidate embeddings are stacked into a
//! (K+1)×d sequence, query first, and passed through a shallow stack of
//! post-norm transformer encoder layers with no positional encoding. Each
//! layer is additionally wrapped as `x + layer(x)` when `extra_skip` is set.
//! Candidates are scored by the dot product of their contextualized vector
//! with the contextualized query.

use std::cell::Cell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::index::{CandidateIndex, RankedList};
use crate::nn::{
    dot, encoder_layer_backward, encoder_layer_forward, encoder_layer_forward_traced,
    Checkpoint, GradientSet, LayerParams, LayerTrace, ParamBuffers, Tensor2D,
};
use crate::Id;

/// Largest candidate list accepted in one forward pass.
pub const MAX_CANDIDATES: usize = 16_384;

pub const CHECKPOINT_SECTION: &str = "cmc";

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of reranker forward passes run on the current thread so far.
pub fn forward_invocations() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmcConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub extra_skip: bool,
}

impl Default for CmcConfig {
    fn default() -> Self {
        CmcConfig {
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            layers: 2,
            extra_skip: true,
        }
    }
}

impl CmcConfig {
    pub fn with_dim(model_dim: usize, heads: usize) -> Self {
        CmcConfig {
            model_dim,
            heads,
            ffn_dim: 4 * model_dim,
            ..Default::default()
        }
    }
}

/// All reranker weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcParams {
    pub layers: Vec<LayerParams>,
    pub extra_skip: bool,
}

impl CmcParams {
    pub fn init<R: Rng>(config: &CmcConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::config("reranker needs at least one layer"));
        }
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(config.model_dim, config.heads, config.ffn_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CmcParams {
            layers,
            extra_skip: config.extra_skip,
        })
    }

    pub fn config(&self) -> CmcConfig {
        let first = &self.layers[0];
        CmcConfig {
            model_dim: first.model_dim(),
            heads: first.heads,
            ffn_dim: first.ffn_dim(),
            layers: self.layers.len(),
            extra_skip: self.extra_skip,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.layers[0].model_dim()
    }

    pub fn zeros_like(&self) -> Self {
        CmcParams {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            extra_skip: self.extra_skip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::config("reranker has no layers"))?;
        for l in &self.layers {
            l.validate()?;
            if l.model_dim() != first.model_dim() {
                return Err(Error::shape("layers disagree on model dim"));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.write_to(&mut ck);
        ck
    }

    /// Adds this reranker to `ck` under the `cmc` section.
    pub fn write_to(&self, ck: &mut Checkpoint) {
        let c = self.config();
        let meta = vec![
            c.model_dim as f32,
            c.heads as f32,
            c.ffn_dim as f32,
            c.layers as f32,
            if c.extra_skip { 1.0 } else { 0.0 },
        ];
        ck.insert(
            format!("{CHECKPOINT_SECTION}.config"),
            Tensor2D::from_vec(1, meta.len(), meta).expect("sized above"),
        );
        ck.insert_section(CHECKPOINT_SECTION, self);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.require(&format!("{CHECKPOINT_SECTION}.config"))?;
        let m = meta.data();
        if m.len() != 5 || m.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::format("malformed cmc.config buffer"));
        }
        let config = CmcConfig {
            model_dim: m[0] as usize,
            heads: m[1] as usize,
            ffn_dim: m[2] as usize,
            layers: m[3] as usize,
            extra_skip: m[4] != 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = CmcParams::init(&config, &mut rng).map_err(|e| Error::format(e.to_string()))?;
        ck.load_section(CHECKPOINT_SECTION, &mut params)?;
        Ok(params)
    }
}

impl ParamBuffers for CmcParams {
    fn buffers(&self) -> Vec<(String, &Tensor2D)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.buffers()
                    .into_iter()
                    .map(move |(n, t)| (format!("layer{i}.{n}"), t))
            })
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor2D> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }
}

/// Contextualized query (row 0) and candidates (rows 1..=K).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualizedSet {
    matrix: Tensor2D,
}

impl ContextualizedSet {
    pub fn from_parts(query: &[f32], candidates: &[impl AsRef<[f32]>]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::shape("contextualized set needs at least one candidate"));
        }
        let mut rows: Vec<&[f32]> = Vec::with_capacity(candidates.len() + 1);
        rows.push(query);
        rows.extend(candidates.iter().map(|c| c.as_ref()));
        Ok(ContextualizedSet {
            matrix: Tensor2D::from_rows(&rows)?,
        })
    }

    pub fn h_query(&self) -> &[f32] {
        self.matrix.row(0)
    }

    pub fn h_candidate(&self, j: usize) -> &[f32] {
        self.matrix.row(j + 1)
    }

    pub fn candidate_count(&self) -> usize {
        self.matrix.rows() - 1
    }

    pub fn query_embedding(&self) -> Embedding {
        Embedding::new(self.h_query().to_vec()).expect("finite forward output")
    }

    pub fn candidate_embeddings(&self) -> Vec<Embedding> {
        (0..self.candidate_count())
            .map(|j| Embedding::new(self.h_candidate(j).to_vec()).expect("finite forward output"))
            .collect()
    }

    pub fn matrix(&self) -> &Tensor2D {
        &self.matrix
    }
}

/// Candidate scores plus the winning position (lowest index among ties).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f32>,
    pub argmax: usize,
}

impl ScoreVector {
    pub fn new(scores: Vec<f32>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::shape("empty score vector"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite candidate score".into()));
        }
        let mut argmax = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[argmax] {
                argmax = j;
            }
        }
        Ok(ScoreVector { scores, argmax })
    }
}

fn stack_input(params: &CmcParams, h_q: &[f32], h_c: &[impl AsRef<[f32]>]) -> Result<Tensor2D> {
    let d = params.model_dim();
    if h_c.is_empty() {
        return Err(Error::shape("reranker needs at least one candidate"));
    }
    if h_c.len() > MAX_CANDIDATES {
        return Err(Error::shape(format!(
            "{} candidates exceed the limit of {MAX_CANDIDATES}",
            h_c.len()
        )));
    }
    if h_q.len() != d {
        return Err(Error::shape(format!("query dim {} != model dim {d}", h_q.len())));
    }
    if let Some(c) = h_c.iter().find(|c| c.as_ref().len() != d) {
        return Err(Error::shape(format!(
            "candidate dim {} != model dim {d}",
            c.as_ref().len()
        )));
    }
    let mut data = Vec::with_capacity((h_c.len() + 1) * d);
    data.extend_from_slice(h_q);
    for c in h_c {
        data.extend_from_slice(c.as_ref());
    }
    let x = Tensor2D::from_vec(h_c.len() + 1, d, data)?;
    if !x.is_finite() {
        return Err(Error::Numeric("reranker input contains a non-finite value".into()));
    }
    Ok(x)
}

fn stack_forward(
    params: &CmcParams,
    mut x: Tensor2D,
    mut traces: Option<&mut Vec<LayerTrace>>,
) -> Result<Tensor2D> {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
    for layer in &params.layers {
        let y = match traces.as_deref_mut() {
            Some(t) => {
                let (y, trace) = encoder_layer_forward_traced(&x, layer)?;
                t.push(trace);
                y
            }
            None => encoder_layer_forward(&x, layer)?,
        };
        x = if params.extra_skip { x.add(&y) } else { y };
    }
    if !x.is_finite() {
        return Err(Error::Numeric("reranker produced a non-finite activation".into()));
    }
    Ok(x)
}

/// Contextualizes the query with its K candidates in one pass.
pub fn cmc_forward(
    params: &CmcParams,
    h_q: &[f32],
    h_c: &[impl AsRef<[f32]>],
) -> Result<ContextualizedSet> {
    let x = stack_input(params, h_q, h_c)?;
    Ok(ContextualizedSet {
        matrix: stack_forward(params, x, None)?,
    })
}

/// Runs several independent (query, candidates) groups. Groups never attend
/// to one another, so each result equals the corresponding [`cmc_forward`].
pub fn cmc_forward_batch<C: AsRef<[f32]> + Sync>(
    params: &CmcParams,
    groups: &[(Vec<f32>, Vec<C>)],
) -> Vec<Result<ContextualizedSet>> {
    groups
        .par_iter()
        .map(|(q, c)| cmc_forward(params, q, c))
        .collect()
}

/// Dot product of the contextualized query with each contextualized candidate.
pub fn cmc_score(ctx: &ContextualizedSet) -> Result<ScoreVector> {
    let q = ctx.h_query();
    ScoreVector::new(
        (0..ctx.candidate_count())
            .map(|j| dot(q, ctx.h_candidate(j)))
            .collect(),
    )
}

/// Lookup of candidate embeddings by id.
pub trait CandidateStore {
    fn candidate(&self, id: Id) -> Option<&[f32]>;
}

impl CandidateStore for CandidateIndex {
    fn candidate(&self, id: Id) -> Option<&[f32]> {
        self.get(id)
    }
}

impl CandidateStore for HashMap<Id, Embedding> {
    fn candidate(&self, id: Id) -> Option<&[f32]> {
        self.get(&id).map(|e| e.values())
    }
}

/// Reorders `ranked` by reranker score and keeps the best `k_out`.
///
/// All candidates go through a single forward pass.
pub fn rerank<S: CandidateStore + ?Sized>(
    params: &CmcParams,
    h_q: &[f32],
    ranked: &RankedList,
    store: &S,
    k_out: usize,
) -> Result<RankedList> {
    if k_out > ranked.len() {
        return Err(Error::InvalidInput(format!(
            "asked for {k_out} of {} candidates",
            ranked.len()
        )));
    }
    if ranked.is_empty() {
        return Ok(RankedList::default());
    }
    let ids = ranked.ids();
    let embeddings = ids
        .iter()
        .map(|&id| store.candidate(id).ok_or(Error::MissingCandidate(id)))
        .collect::<Result<Vec<_>>>()?;
    let ctx = cmc_forward(params, h_q, &embeddings)?;
    let scores = cmc_score(&ctx)?;
    RankedList::top_k(ids.into_iter().zip(scores.scores).collect(), k_out)
}

/// Gradients from one recorded forward pass.
#[derive(Debug, Clone)]
pub struct CmcGradients {
    pub params: GradientSet,
    pub d_query: Vec<f32>,
    /// K×d, one row per candidate.
    pub d_candidates: Tensor2D,
}

struct Record {
    traces: Vec<LayerTrace>,
    output: Tensor2D,
}

/// Records a forward pass so that gradients can be taken afterwards.
#[derive(Default)]
pub struct Tape {
    record: Option<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        params: &CmcParams,
        h_q: &[f32],
        h_c: &[impl AsRef<[f32]>],
    ) -> Result<ScoreVector> {
        let x = stack_input(params, h_q, h_c)?;
        let mut traces = Vec::with_capacity(params.layers.len());
        let output = stack_forward(params, x, Some(&mut traces))?;
        let ctx = ContextualizedSet { matrix: output };
        let scores = cmc_score(&ctx)?;
        self.record = Some(Record {
            traces,
            output: ctx.matrix,
        });
        Ok(scores)
    }

    /// Backpropagates `d_scores` (gradient of the loss with respect to the
    /// candidate scores) through the scoring head and every layer.
    pub fn backward(&self, params: &CmcParams, d_scores: &[f32]) -> Result<CmcGradients> {
        let record = self
            .record
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let h = &record.output;
        let k = h.rows() - 1;
        if d_scores.len() != k {
            return Err(Error::shape(format!(
                "{} score gradients for {k} candidates",
                d_scores.len()
            )));
        }
        if record.traces.len() != params.layers.len() {
            return Err(Error::State("tape was recorded with different parameters".into()));
        }
        let mut dh = Tensor2D::zeros(h.rows(), h.cols());
        for (j, &g) in d_scores.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for c in 0..h.cols() {
                let q = h.get(0, c);
                let cand = h.get(j + 1, c);
                dh.row_mut(0)[c] += g * cand;
                dh.row_mut(j + 1)[c] += g * q;
            }
        }
        let mut grads = params.zeros_like();
        for (i, layer) in params.layers.iter().enumerate().rev() {
            let dx = encoder_layer_backward(&record.traces[i], layer, &dh, &mut grads.layers[i])?;
            dh = if params.extra_skip { dh.add(&dx) } else { dx };
        }
        let d_query = dh.row(0).to_vec();
        let d_candidates = dh.gather_rows(&(1..=k).collect::<Vec<_>>());
        Ok(CmcGradients {
            params: GradientSet::from_params(&grads),
            d_query,
            d_candidates,
        })
    }
}

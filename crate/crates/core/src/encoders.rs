//! Single-vector query and candidate embeddings.
//!
//! Two encoder kinds are supported: a pass-through for embeddings computed
//! elsewhere (the usual path) and a small trainable token-lookup encoder whose
//! output is the first-position row or the mean of the looked-up rows.
//!
//! Embedding files use a little-endian binary layout:
//!
//! ```text
//! magic "CMCE" | version u16 | dim u32 | count u64 | count × (id u64, dim × f32)
//! ```
//!
//! A text form with one `id<whitespace>v1,v2,...` record per line is also
//! accepted by [`load_embedding_file`].

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{push_f32s, write_atomic, Reader};
use crate::nn::{ParamBuffers, Tensor2D};
use crate::Id;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CMCE";
pub const EMBEDDING_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Candidate,
}

/// Token ids of one query or candidate text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub role: Role,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(role: Role, ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        Ok(TokenSequence { role, ids })
    }
}

/// A finite real vector standing for one query or candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding contains a non-finite value".into()));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Precomputed,
    TrainableLookup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// The row of the first token, analogous to a `[CLS]` read-out.
    #[default]
    FirstPosition,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub dim: usize,
    /// Vocabulary size; trainable encoders only.
    pub vocab_size: usize,
    pub aggregation: Aggregation,
    /// Longest accepted token sequence; trainable encoders only.
    pub max_len: usize,
}

impl EncoderSpec {
    pub fn precomputed(dim: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::Precomputed,
            dim,
            vocab_size: 0,
            aggregation: Aggregation::FirstPosition,
            max_len: 0,
        }
    }

    pub fn lookup(dim: usize, vocab_size: usize, aggregation: Aggregation, max_len: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::TrainableLookup,
            dim,
            vocab_size,
            aggregation,
            max_len,
        }
    }
}

/// What gets handed to an encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderInput {
    Tokens(TokenSequence),
    Raw(Embedding),
}

/// An encoder instance. Query and candidate encoders are separate values and
/// never share a table.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    table: Tensor2D,
}

impl Encoder {
    pub fn precomputed(dim: usize) -> Self {
        Encoder {
            spec: EncoderSpec::precomputed(dim),
            table: Tensor2D::zeros(0, dim),
        }
    }

    /// Lookup encoder with table entries drawn from N(0, 1/dim)-ish uniform noise.
    pub fn lookup<R: Rng>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        if spec.kind != EncoderKind::TrainableLookup {
            return Err(Error::config("lookup encoder needs a trainable-lookup spec"));
        }
        if spec.dim == 0 || spec.vocab_size == 0 || spec.max_len == 0 {
            return Err(Error::config("lookup encoder needs positive dim, vocab and max_len"));
        }
        let bound = (3.0 / spec.dim as f32).sqrt();
        let data = (0..spec.vocab_size * spec.dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let table = Tensor2D::from_vec(spec.vocab_size, spec.dim, data)?;
        Ok(Encoder { spec, table })
    }

    pub fn from_table(spec: EncoderSpec, table: Tensor2D) -> Result<Self> {
        if spec.kind != EncoderKind::TrainableLookup
            || table.shape() != (spec.vocab_size, spec.dim)
        {
            return Err(Error::shape(format!(
                "table {:?} does not match spec ({}, {})",
                table.shape(),
                spec.vocab_size,
                spec.dim
            )));
        }
        Ok(Encoder { spec, table })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn table(&self) -> &Tensor2D {
        &self.table
    }

    pub fn encode(&self, input: &EncoderInput) -> Result<Embedding> {
        match (self.spec.kind, input) {
            (EncoderKind::Precomputed, EncoderInput::Raw(e)) => {
                if e.dim() != self.spec.dim {
                    return Err(Error::shape(format!(
                        "embedding dim {} != encoder dim {}",
                        e.dim(),
                        self.spec.dim
                    )));
                }
                Ok(e.clone())
            }
            (EncoderKind::TrainableLookup, EncoderInput::Tokens(seq)) => {
                self.check_tokens(seq)?;
                let dim = self.spec.dim;
                match self.spec.aggregation {
                    Aggregation::FirstPosition => {
                        Embedding::new(self.table.row(seq.ids[0] as usize).to_vec())
                    }
                    Aggregation::Mean => {
                        let mut acc = vec![0.0f32; dim];
                        for &t in &seq.ids {
                            for (a, v) in acc.iter_mut().zip(self.table.row(t as usize)) {
                                *a += v;
                            }
                        }
                        let inv = 1.0 / seq.ids.len() as f32;
                        acc.iter_mut().for_each(|a| *a *= inv);
                        Embedding::new(acc)
                    }
                }
            }
            (EncoderKind::Precomputed, EncoderInput::Tokens(_)) => Err(Error::Encode(
                "precomputed encoder cannot take tokens".into(),
            )),
            (EncoderKind::TrainableLookup, EncoderInput::Raw(_)) => Err(Error::Encode(
                "lookup encoder cannot take a raw embedding".into(),
            )),
        }
    }

    fn check_tokens(&self, seq: &TokenSequence) -> Result<()> {
        if seq.ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if seq.ids.len() > self.spec.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds max_len {}",
                seq.ids.len(),
                self.spec.max_len
            )));
        }
        if let Some(&id) = seq.ids.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(Error::InvalidToken {
                id,
                vocab: self.spec.vocab_size,
            });
        }
        Ok(())
    }

    /// Accumulates the gradient of a loss with respect to the lookup table,
    /// given the gradient with respect to the encoded embedding.
    pub fn accumulate_grad(&self, seq: &TokenSequence, d_embedding: &[f32], grad: &mut Tensor2D) -> Result<()> {
        if self.spec.kind != EncoderKind::TrainableLookup {
            return Err(Error::State("precomputed encoder has no parameters".into()));
        }
        self.check_tokens(seq)?;
        if d_embedding.len() != self.spec.dim || grad.shape() != self.table.shape() {
            return Err(Error::shape("gradient shape does not match encoder"));
        }
        let (tokens, weight): (&[u32], f32) = match self.spec.aggregation {
            Aggregation::FirstPosition => (&seq.ids[..1], 1.0),
            Aggregation::Mean => (&seq.ids, 1.0 / seq.ids.len() as f32),
        };
        for &t in tokens {
            for (g, d) in grad.row_mut(t as usize).iter_mut().zip(d_embedding) {
                *g += weight * d;
            }
        }
        Ok(())
    }
}

impl ParamBuffers for Encoder {
    fn buffers(&self) -> Vec<(String, &Tensor2D)> {
        vec![("table".into(), &self.table)]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor2D> {
        vec![&mut self.table]
    }
}

/// Ids with one embedding each, all of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub ids: Vec<Id>,
    pub embeddings: Vec<Embedding>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, ids: Vec<Id>, embeddings: Vec<Embedding>) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::shape(format!(
                "{} ids for {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(Error::shape(format!("embedding of dim {} in a set of dim {dim}", e.dim())));
        }
        check_unique(&ids)?;
        Ok(EmbeddingSet { dim, ids, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, e) in self.ids.iter().zip(&self.embeddings) {
            out.extend_from_slice(&id.to_le_bytes());
            push_f32s(&mut out, e.values());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != EMBEDDING_MAGIC {
            return Err(Error::format("bad embedding file magic"));
        }
        let version = r.u16()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::format(format!("unsupported embedding file version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let record = 8 + 4 * dim;
        if count.checked_mul(record) != Some(r.remaining()) {
            return Err(Error::format(format!(
                "header promises {count} records of {record} bytes, payload has {} bytes",
                r.remaining()
            )));
        }
        let mut ids = Vec::with_capacity(count);
        let mut embeddings = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(r.u64()?);
            embeddings.push(Embedding(r.f32s(dim)?));
        }
        check_unique(&ids)?;
        Ok(EmbeddingSet { dim, ids, embeddings })
    }

    /// Parses `id<whitespace>v1,v2,...` lines; blank lines and `#` comments
    /// are skipped. An empty file yields an empty set of dim 0.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        let mut embeddings = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::format(format!("line {}: {what}", lineno + 1));
            let (id, rest) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| bad("expected `id values`"))?;
            let id: Id = id.parse().map_err(|_| bad("id is not an unsigned integer"))?;
            let values = rest
                .trim()
                .split(',')
                .map(|v| v.trim().parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("value is not a number"))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::shape(format!(
                        "line {}: {} values, expected {d}",
                        lineno + 1,
                        values.len()
                    )))
                }
                _ => {}
            }
            ids.push(id);
            embeddings.push(Embedding::new(values)?);
        }
        check_unique(&ids)?;
        Ok(EmbeddingSet {
            dim: dim.unwrap_or(0),
            ids,
            embeddings,
        })
    }
}

fn check_unique(ids: &[Id]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for &id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(())
}

/// Reads an embedding file in binary form, falling back to the text form
/// when the magic bytes are absent.
pub fn load_embedding_file(path: &Path) -> Result<(Vec<Id>, Vec<Embedding>)> {
    let set = read_embedding_set(path)?;
    Ok((set.ids, set.embeddings))
}

pub fn read_embedding_set(path: &Path) -> Result<EmbeddingSet> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        EmbeddingSet::from_bytes(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::format("not a binary embedding file and not UTF-8 text"))?;
        EmbeddingSet::from_text(text)
    }
}

pub fn save_embedding_file(path: &Path, set: &EmbeddingSet) -> Result<()> {
    write_atomic(path, &set.to_bytes())
}

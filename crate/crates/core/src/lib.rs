//! Retrieve-and-rerank engine built around a multi-candidate self-attention
//! reranker.
//!
//! A first-stage exact inner-product retriever ([`index`]) produces a pool of
//! candidates; the reranker ([`cmc`]) encodes the query together with every
//! pooled candidate in one pass of a shallow, position-free transformer and
//! scores candidates by contextualized dot product. [`training`] holds the
//! objective and negative sampling, [`pipeline`] wires the stages together and
//! [`eval`] provides metrics, a synthetic task and latency benchmarks.

pub mod cmc;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod index;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};

/// Identifier of a candidate or query.
pub type Id = u64;

/// Seed used whenever the caller does not supply one.
pub const DEFAULT_SEED: u64 = 20_240_917;

//! First-stage candidate store with exact maximum-inner-product search.
//!
//! One vector per candidate, kept row-major. Index files are laid out as
//!
//! ```text
//! magic "CMCI"   4 bytes
//! version u16    2 bytes
//! dim u32        4 bytes
//! count u64      8 bytes
//! crc32 u32      4 bytes   (over the id table and the matrix)
//! ids            count × u64
//! matrix         count × dim × f32
//! ```
//!
//! all little-endian, so a file is exactly
//! `INDEX_HEADER_LEN + count × 8 + count × dim × 4` bytes.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::io::{push_f32s, write_atomic, Reader};
use crate::nn::{dot, Tensor2D};
use crate::Id;

pub const INDEX_MAGIC: &[u8; 4] = b"CMCI";
pub const INDEX_VERSION: u16 = 1;
pub const INDEX_HEADER_LEN: usize = 22;

/// Rows per parallel scoring shard.
const SHARD_ROWS: usize = 16_384;

/// `(id, score)` pairs ordered by score descending, then id ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    entries: Vec<(Id, f32)>,
}

/// Total order used for every ranking in the crate: higher score first,
/// lower id first among equal scores.
pub fn rank_order(a: &(Id, f32), b: &(Id, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl RankedList {
    /// Sorts `entries` into rank order. Ids must be unique and scores finite.
    pub fn from_unsorted(mut entries: Vec<(Id, f32)>) -> Result<Self> {
        if let Some((id, s)) = entries.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::Numeric(format!("candidate {id} has score {s}")));
        }
        entries.sort_by(rank_order);
        let mut by_id: Vec<Id> = entries.iter().map(|e| e.0).collect();
        by_id.sort_unstable();
        if let Some(w) = by_id.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0]));
        }
        Ok(RankedList { entries })
    }

    /// Keeps the best `k` of `entries`.
    pub fn top_k(entries: Vec<(Id, f32)>, k: usize) -> Result<Self> {
        let mut list = Self::from_unsorted(entries)?;
        list.truncate(k);
        Ok(list)
    }

    pub fn entries(&self) -> &[(Id, f32)] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<Id> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    pub fn first(&self) -> Option<(Id, f32)> {
        self.entries.first().copied()
    }

    pub fn contains(&self, id: Id) -> bool {
        self.entries.iter().any(|e| e.0 == id)
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: Id) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == id).map(|p| p + 1)
    }
}

/// Immutable store of one embedding per candidate id.
#[derive(Debug, Clone)]
pub struct CandidateIndex {
    dim: usize,
    ids: Vec<Id>,
    matrix: Tensor2D,
    source: Option<PathBuf>,
}

impl CandidateIndex {
    /// Builds an in-memory index; rows are stored in ascending id order.
    pub fn build(ids: &[Id], embeddings: &[Embedding], dim: usize) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::shape(format!(
                "{} ids for {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(Error::shape(format!("embedding dim {} != index dim {dim}", e.dim())));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        if let Some(w) = order.windows(2).find(|w| ids[w[0]] == ids[w[1]]) {
            return Err(Error::DuplicateId(ids[w[0]]));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in &order {
            data.extend_from_slice(embeddings[i].values());
        }
        Ok(CandidateIndex {
            dim,
            ids: order.iter().map(|&i| ids[i]).collect(),
            matrix: Tensor2D::from_vec(ids.len(), dim, data)?,
            source: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Candidate ids in ascending order.
    pub fn ids(&self) -> &[Id] {
        &self.ids
    }

    /// Path the index was opened from, if any.
    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn get(&self, id: Id) -> Option<&[f32]> {
        self.ids
            .binary_search(&id)
            .ok()
            .map(|row| self.matrix.row(row))
    }

    pub fn embedding(&self, id: Id) -> Result<Embedding> {
        self.get(id)
            .map(|v| Embedding::new(v.to_vec()))
            .ok_or(Error::MissingCandidate(id))?
    }

    /// Inner product between `query` and the stored vector of `id`.
    pub fn score(&self, query: &[f32], id: Id) -> Result<f32> {
        self.check_query(query)?;
        self.get(id)
            .map(|v| dot(query, v))
            .ok_or(Error::MissingCandidate(id))
    }

    fn check_query(&self, query: &[f32]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::shape(format!(
                "query dim {} != index dim {}",
                query.len(),
                self.dim
            )));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("query contains a non-finite value".into()));
        }
        Ok(())
    }

    /// Exact top-`k` by inner product; ties go to the smaller id.
    pub fn search_topk(&self, query: &[f32], k: usize) -> Result<RankedList> {
        self.check_query(query)?;
        let k = k.min(self.len());
        if k == 0 {
            return Ok(RankedList::default());
        }
        let score_rows = |start: usize, end: usize| -> Vec<(Id, f32)> {
            (start..end)
                .map(|r| (self.ids[r], dot(query, self.matrix.row(r))))
                .collect()
        };
        let mut scored: Vec<(Id, f32)> = if self.len() > SHARD_ROWS {
            (0..self.len().div_ceil(SHARD_ROWS))
                .into_par_iter()
                .flat_map_iter(|s| score_rows(s * SHARD_ROWS, ((s + 1) * SHARD_ROWS).min(self.len())))
                .collect()
        } else {
            score_rows(0, self.len())
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(RankedList { entries: scored })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.len() * (8 + 4 * self.dim));
        for id in &self.ids {
            payload.extend_from_slice(&id.to_le_bytes());
        }
        push_f32s(&mut payload, self.matrix.data());
        let mut out = Vec::with_capacity(INDEX_HEADER_LEN + payload.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::format("bad index magic"));
        }
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(Error::format(format!("unsupported index version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let crc = r.u32()?;
        let expected = count
            .checked_mul(8 + 4 * dim)
            .ok_or_else(|| Error::format("index header overflows"))?;
        if r.remaining() != expected {
            return Err(Error::format(format!(
                "index payload is {} bytes, header implies {expected}",
                r.remaining()
            )));
        }
        if crc32fast::hash(&bytes[INDEX_HEADER_LEN..]) != crc {
            return Err(Error::format("index checksum mismatch"));
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(r.u64()?);
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("index ids are not strictly ascending"));
        }
        let data = r.f32s(count * dim)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("index contains non-finite values"));
        }
        Ok(CandidateIndex {
            dim,
            ids,
            matrix: Tensor2D::from_vec(count, dim, data)?,
            source: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Expected size of an index file with `count` candidates of dimension `dim`.
pub fn index_file_len(count: usize, dim: usize) -> usize {
    INDEX_HEADER_LEN + count * 8 + count * dim * 4
}

/// Builds an index over `ids`/`embeddings` and persists it at `path`.
pub fn build_index(path: &Path, ids: &[Id], embeddings: &[Embedding], dim: usize) -> Result<CandidateIndex> {
    let mut index = CandidateIndex::build(ids, embeddings, dim)?;
    index.save(path)?;
    index.source = Some(path.to_path_buf());
    Ok(index)
}

/// Opens a persisted index read-only after verifying its checksum.
pub fn open_index(path: &Path) -> Result<CandidateIndex> {
    let mut index = CandidateIndex::from_bytes(&std::fs::read(path)?)?;
    index.source = Some(path.to_path_buf());
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn unit_basis() -> CandidateIndex {
        let es: Vec<Embedding> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                emb(&v)
            })
            .collect();
        CandidateIndex::build(&[10, 11, 12, 13], &es, 4).unwrap()
    }

    #[test]
    fn empty_index_is_searchable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.cmci");
        let idx = build_index(&p, &[], &[], 3).unwrap();
        assert!(idx.search_topk(&[1.0, 0.0, 0.0], 5).unwrap().is_empty());
        let opened = open_index(&p).unwrap();
        assert_eq!(opened.dim(), 3);
        assert!(opened.is_empty());
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, INDEX_HEADER_LEN);
    }

    #[test]
    fn one_candidate_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.cmci");
        build_index(&p, &[5], &[emb(&[1.0, 2.0, 3.0])], 3).unwrap();
        assert_eq!(
            std::fs::metadata(&p).unwrap().len() as usize,
            INDEX_HEADER_LEN + 8 + 3 * 4
        );
    }

    #[test]
    fn stored_unit_vector_ranks_first() {
        let idx = unit_basis();
        let r = idx.search_topk(&[0.0, 0.0, 1.0, 0.0], 4).unwrap();
        assert_eq!(r.first(), Some((12, 1.0)));
        // remaining three tie at 0 and come back in id order
        assert_eq!(r.ids(), vec![12, 10, 11, 13]);
    }

    #[test]
    fn k_edge_cases() {
        let idx = unit_basis();
        assert!(idx.search_topk(&[1.0; 4], 0).unwrap().is_empty());
        assert_eq!(idx.search_topk(&[1.0; 4], 100).unwrap().len(), 4);
        assert!(matches!(
            idx.search_topk(&[1.0; 3], 1),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            CandidateIndex::build(&[1, 1], &[emb(&[0.0]), emb(&[1.0])], 1),
            Err(Error::DuplicateId(1))
        ));
        assert!(matches!(
            CandidateIndex::build(&[1, 2], &[emb(&[0.0]), emb(&[1.0, 2.0])], 1),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn tampered_payload_fails_checksum() {
        let bytes = unit_basis().to_bytes();
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x01;
        assert!(matches!(CandidateIndex::from_bytes(&bad), Err(Error::Format(_))));
        assert!(CandidateIndex::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(CandidateIndex::from_bytes(&bytes).is_ok());
    }

    #[test]
    fn ranked_list_rejects_duplicates() {
        assert!(matches!(
            RankedList::from_unsorted(vec![(1, 0.5), (2, 0.1), (1, 0.3)]),
            Err(Error::DuplicateId(1))
        ));
        let r = RankedList::from_unsorted(vec![(3, 0.5), (1, 0.5), (2, 0.9)]).unwrap();
        assert_eq!(r.ids(), vec![2, 1, 3]);
        assert_eq!(r.rank_of(3), Some(3));
    }
}

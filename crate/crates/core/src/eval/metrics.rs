use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::Id;

pub const MRR_CUTOFF: usize = 10;

/// One evaluated query: the list produced by some stage and the gold answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    pub query_id: Id,
    pub gold: Id,
    pub ranked: Vec<Id>,
    /// Whether the gold survived first-stage retrieval.
    pub gold_in_pool: bool,
}

impl EvalRecord {
    /// 1-based rank of the gold, if present.
    pub fn gold_rank(&self) -> Option<usize> {
        self.ranked.iter().position(|&id| id == self.gold).map(|p| p + 1)
    }

    pub fn top1_correct(&self) -> bool {
        self.ranked.first() == Some(&self.gold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub queries: usize,
    pub in_pool: usize,
    /// `(k, recall@k)` in the order the cutoffs were requested.
    pub recall: Vec<(usize, f64)>,
    pub mrr_at_10: f64,
    /// Top-1 accuracy over every query.
    pub unnormalized_accuracy: f64,
    /// Top-1 accuracy over queries whose gold was in the pool.
    pub normalized_accuracy: Option<f64>,
}

impl MetricTable {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.0 == k).map(|r| r.1)
    }

    pub fn normalized_accuracy(&self) -> Result<f64> {
        self.normalized_accuracy
            .ok_or_else(|| Error::UndefinedMetric("no query has its gold in the pool".into()))
    }

    /// `metric,value` lines with a header row. An undefined normalized
    /// accuracy is written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "queries,{}", self.queries);
        let _ = writeln!(out, "gold_in_pool,{}", self.in_pool);
        for (k, r) in &self.recall {
            let _ = writeln!(out, "recall@{k},{r:.6}");
        }
        let _ = writeln!(out, "mrr@{MRR_CUTOFF},{:.6}", self.mrr_at_10);
        let _ = writeln!(out, "accuracy_unnormalized,{:.6}", self.unnormalized_accuracy);
        match self.normalized_accuracy {
            Some(a) => {
                let _ = writeln!(out, "accuracy_normalized,{a:.6}");
            }
            None => out.push_str("accuracy_normalized,nan\n"),
        }
        out
    }
}

/// Aggregates `records` at the recall cutoffs `ks`.
pub fn compute_metrics(records: &[EvalRecord], ks: &[usize]) -> Result<MetricTable> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no evaluation records".into()));
    }
    if ks.contains(&0) {
        return Err(Error::config("recall cutoff must be positive"));
    }
    for r in records {
        let mut seen = HashSet::with_capacity(r.ranked.len());
        if let Some(&dup) = r.ranked.iter().find(|&&id| !seen.insert(id)) {
            return Err(Error::InvalidInput(format!(
                "query {} ranks candidate {dup} twice",
                r.query_id
            )));
        }
        if !r.gold_in_pool && r.ranked.contains(&r.gold) {
            return Err(Error::InvalidInput(format!(
                "query {} ranks its gold but marks it as outside the pool",
                r.query_id
            )));
        }
    }
    let n = records.len() as f64;
    let ranks: Vec<Option<usize>> = records.iter().map(EvalRecord::gold_rank).collect();
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(x) if *x <= k)).count();
            (k, hits as f64 / n)
        })
        .collect();
    let mrr_at_10 = ranks
        .iter()
        .map(|r| match r {
            Some(x) if *x <= MRR_CUTOFF => 1.0 / *x as f64,
            _ => 0.0,
        })
        .sum::<f64>()
        / n;
    let correct = records.iter().filter(|r| r.top1_correct()).count();
    let in_pool: Vec<&EvalRecord> = records.iter().filter(|r| r.gold_in_pool).collect();
    let normalized_accuracy = if in_pool.is_empty() {
        None
    } else {
        let c = in_pool.iter().filter(|r| r.top1_correct()).count();
        Some(c as f64 / in_pool.len() as f64)
    };
    Ok(MetricTable {
        queries: records.len(),
        in_pool: in_pool.len(),
        recall,
        mrr_at_10,
        unnormalized_accuracy: correct as f64 / n,
        normalized_accuracy,
    })
}

/// One record per line: `query_id gold in_pool ids`, where `in_pool` is 0 or
/// 1 and `ids` is comma-separated (`-` for an empty list).
pub fn records_to_text(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let ids = if r.ranked.is_empty() {
            "-".to_string()
        } else {
            r.ranked.iter().map(Id::to_string).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(out, "{} {} {} {}", r.query_id, r.gold, u8::from(r.gold_in_pool), ids);
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::format(format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, gold, in_pool, ids] = fields[..] else {
            return Err(bad("expected 4 fields"));
        };
        let id = |s: &str| s.parse::<Id>().map_err(|_| bad(&format!("bad id {s:?}")));
        let gold_in_pool = match in_pool {
            "0" => false,
            "1" => true,
            _ => return Err(bad("in_pool must be 0 or 1")),
        };
        let ranked = if ids == "-" {
            Vec::new()
        } else {
            ids.split(',').map(id).collect::<Result<_>>()?
        };
        out.push(EvalRecord {
            query_id: id(qid)?,
            gold: id(gold)?,
            ranked,
            gold_in_pool,
        });
    }
    Ok(out)
}

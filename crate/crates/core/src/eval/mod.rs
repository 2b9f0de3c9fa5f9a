//! Metrics, the synthetic confusable-candidate task and latency benchmarks.

mod bench;
mod metrics;
mod synthetic;

pub use bench::{bench_latency, BenchReport, BenchRow};
pub use metrics::{
    compute_metrics, parse_records, records_to_text, EvalRecord, MetricTable, MRR_CUTOFF,
};
pub use synthetic::{
    generate_synthetic, BaselinePair, SyntheticQuery, SyntheticTask, SyntheticTaskSpec,
};

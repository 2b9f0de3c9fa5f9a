//! `cmc`: build indexes, generate synthetic data, train, rerank, evaluate and
//! benchmark from the command line.
//!
//! Every subcommand reads its settings from built-in defaults, then an
//! optional `--config` file of `key = value` lines, then `--set key=value`
//! pairs and finally dedicated flags; later sources win. Exit codes: 0 on
//! success, 1 on usage or configuration errors, 2 on data or format errors.

mod settings;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cmc_core::cmc::{CmcConfig, CmcParams};
use cmc_core::encoders::{read_embedding_set, Encoder};
use cmc_core::eval::{
    bench_latency, compute_metrics, generate_synthetic, parse_records, records_to_text, SyntheticTask,
    SyntheticTaskSpec,
};
use cmc_core::index::{build_index, open_index};
use cmc_core::io::{parse_key_values, write_atomic};
use cmc_core::nn::Checkpoint;
use cmc_core::pipeline::{results_to_text, Mode, Pipeline, PipelineSettings};
use cmc_core::training::{train, TrainingData};
use cmc_core::DEFAULT_SEED;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use settings::{BenchSettings, EvalSettings, IndexSettings, Settings, TrainSettings};

#[derive(Parser, Debug)]
#[command(name = "cmc", version, about = "Retrieve-and-rerank with a multi-candidate reranker")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// RNG seed [default: 20240917]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of `key = value` settings
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one setting; may be repeated
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the effective settings and exit without running
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a search index from an embedding file
    BuildIndex {
        #[arg(long, value_name = "PATH")]
        embeddings: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Write a synthetic confusable-candidate dataset to a directory
    GenerateSynthetic {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the reranker on a dataset directory
    Train {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Where the final checkpoint goes
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh model
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        /// Per-step loss log (CSV)
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Run retrieval and reranking over a dataset split
    Rerank {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Prebuilt index over the retriever corpus; built in memory if absent
        #[arg(long, value_name = "PATH")]
        index: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Evaluation records of the final lists
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Evaluation records of the first-stage lists
        #[arg(long, value_name = "PATH")]
        retrieved: Option<PathBuf>,
        /// Per-query stage timings; wall-clock, so not reproducible
        #[arg(long, value_name = "PATH")]
        timings: Option<PathBuf>,
        #[arg(long)]
        k_retrieve: Option<usize>,
        #[arg(long)]
        k_prime: Option<usize>,
    },
    /// Compute metrics from an evaluation records file
    Evaluate {
        #[arg(long, value_name = "PATH")]
        records: PathBuf,
        /// Recall cutoffs, comma-separated
        #[arg(long, value_name = "K,...")]
        k: Option<String>,
        /// Metric table (CSV)
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Time reranker forward passes over growing candidate counts
    Bench {
        /// Model to time; a random one of `--dim` is used if absent
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Candidate counts, comma-separated and increasing
        #[arg(long, value_name = "K,...")]
        k: Option<String>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Benchmark report (CSV)
        #[arg(long, value_name = "PATH", default_value = "bench.csv")]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Split {
    Train,
    Test,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl From<cmc_core::Error> for CliError {
    fn from(e: cmc_core::Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn require_input(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input {} does not exist", path.display())))
    }
}

/// Refuses to let an output overwrite one of the inputs.
fn distinct_output(out: &Path, inputs: &[&Path]) -> CliResult<()> {
    let Ok(out) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().is_ok_and(|i| i == out) {
            return Err(CliError::Usage(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

/// Settings as `key = value` pairs from the config file, then `--set`, then flags.
struct Layers {
    pairs: Vec<(String, String)>,
    threads: Option<usize>,
    show: bool,
}

impl Layers {
    fn collect(common: &Common, flags: Vec<(&str, Option<String>)>) -> CliResult<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = &common.config {
            require_input(path)?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            pairs.extend(parse_key_values(&text)?);
        }
        for s in &common.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            pairs.push((k.trim().replace('-', "_"), v.trim().to_string()));
        }
        if let Some(seed) = common.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        if let Some(t) = common.threads {
            pairs.push(("threads".into(), t.to_string()));
        }
        pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));

        let mut threads = None;
        pairs.retain(|(k, v)| {
            if k == "threads" {
                threads = Some(v.clone());
                false
            } else {
                true
            }
        });
        let threads = threads
            .map(|v| match v.parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(CliError::Usage(format!("threads: expected a positive integer, got {v:?}"))),
            })
            .transpose()?;
        Ok(Layers {
            pairs,
            threads,
            show: common.show_config,
        })
    }

    /// Applies every pair to `settings`. Returns false when the caller should
    /// stop after `--show-config`.
    fn apply<S: Settings>(&self, name: &str, settings: &mut S) -> CliResult<bool> {
        for (k, v) in &self.pairs {
            settings.set(k, v)?;
        }
        if self.show {
            let threads = self.threads.map_or_else(|| "auto".to_string(), |t| t.to_string());
            print!("command = {name}\nthreads = {threads}\n{}", settings.to_text());
            return Ok(false);
        }
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
        }
        Ok(true)
    }
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    match &cli.command {
        Command::BuildIndex { embeddings, out } => {
            let layers = Layers::collect(common, vec![])?;
            if !layers.apply("build-index", &mut IndexSettings { seed: DEFAULT_SEED })? {
                return Ok(());
            }
            require_input(embeddings)?;
            distinct_output(out, &[embeddings])?;
            let set = read_embedding_set(embeddings)?;
            let index = build_index(out, &set.ids, &set.embeddings, set.dim)?;
            println!("indexed {} embeddings of dim {} into {}", index.len(), index.dim(), out.display());
        }
        Command::GenerateSynthetic { out } => {
            let layers = Layers::collect(common, vec![])?;
            let mut spec = SyntheticTaskSpec::default();
            if !layers.apply("generate-synthetic", &mut spec)? {
                return Ok(());
            }
            let task = generate_synthetic(&spec)?;
            task.write_to_dir(out)?;
            println!(
                "wrote {} candidates, {} train and {} test queries to {}",
                task.ids.len(),
                task.train.len(),
                task.test.len(),
                out.display()
            );
        }
        Command::Train { dataset, out, init, log, epochs, lr } => {
            let layers = Layers::collect(common, vec![("epochs", opt(epochs)), ("base_lr", opt(lr))])?;
            let mut s = TrainSettings::default();
            if !layers.apply("train", &mut s)? {
                return Ok(());
            }
            require_input(dataset)?;
            if let Some(init) = init {
                require_input(init)?;
            }
            let mut inputs = vec![dataset.as_path()];
            inputs.extend(init.as_deref());
            for o in [Some(out), log.as_ref()].into_iter().flatten() {
                distinct_output(o, &inputs)?;
            }
            cmd_train(dataset, out, init.as_deref(), log.as_deref(), &s)?;
        }
        Command::Rerank {
            dataset,
            checkpoint,
            index,
            split,
            out,
            retrieved,
            timings,
            k_retrieve,
            k_prime,
        } => {
            let layers = Layers::collect(common, vec![("k_retrieve", opt(k_retrieve)), ("k_prime", opt(k_prime))])?;
            let mut s = PipelineSettings::default();
            if !layers.apply("rerank", &mut s)? {
                return Ok(());
            }
            let mut inputs = vec![dataset.as_path(), checkpoint.as_path()];
            inputs.extend(index.as_deref());
            for i in &inputs {
                require_input(i)?;
            }
            for o in [Some(out), retrieved.as_ref(), timings.as_ref()].into_iter().flatten() {
                distinct_output(o, &inputs)?;
            }
            let outputs = RerankOutputs {
                records: out,
                retrieved: retrieved.as_deref(),
                timings: timings.as_deref(),
            };
            cmd_rerank(dataset, checkpoint, index.as_deref(), *split, &outputs, &s)?;
        }
        Command::Evaluate { records, k, out } => {
            let layers = Layers::collect(common, vec![("ks", k.clone())])?;
            let mut s = EvalSettings::default();
            if !layers.apply("evaluate", &mut s)? {
                return Ok(());
            }
            require_input(records)?;
            if let Some(o) = out {
                distinct_output(o, &[records])?;
            }
            cmd_evaluate(records, out.as_deref(), &s)?;
        }
        Command::Bench { checkpoint, k, dim, repeats, out } => {
            let layers = Layers::collect(common, vec![("ks", k.clone()), ("dim", opt(dim)), ("repeats", opt(repeats))])?;
            let mut s = BenchSettings::default();
            if !layers.apply("bench", &mut s)? {
                return Ok(());
            }
            if let Some(c) = checkpoint {
                require_input(c)?;
                distinct_output(out, &[c])?;
            }
            cmd_bench(checkpoint.as_deref(), out, &s)?;
        }
    }
    Ok(())
}

fn cmd_train(dataset: &Path, out: &Path, init: Option<&Path>, log: Option<&Path>, s: &TrainSettings) -> CliResult<()> {
    let task = SyntheticTask::read_from_dir(dataset)?;
    let mut params = match init {
        Some(path) => {
            let params = CmcParams::from_checkpoint(&Checkpoint::load(path)?)?;
            if params.model_dim() != task.model_dim() {
                return Err(CliError::Data(format!(
                    "checkpoint has dim {} but the dataset has dim {}",
                    params.model_dim(),
                    task.model_dim()
                )));
            }
            params
        }
        None => CmcParams::init(
            &s.model_config(task.model_dim()),
            &mut ChaCha8Rng::seed_from_u64(s.training.seed),
        )?,
    };
    let index = task.index()?;
    let store = task.cmc_store();
    let examples = task.training_examples();
    let data = TrainingData {
        examples: &examples,
        retriever: &index,
        candidates: &store,
    };
    let report = train(&s.training, &data, &mut params)?;
    params.to_checkpoint().save(out)?;
    if let Some(log) = log {
        write_atomic(log, report.log_csv().as_bytes())?;
    }
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {}: mean loss {loss:.4}", epoch + 1);
    }
    println!("wrote {}", out.display());
    Ok(())
}

struct RerankOutputs<'a> {
    records: &'a Path,
    retrieved: Option<&'a Path>,
    timings: Option<&'a Path>,
}

fn cmd_rerank(
    dataset: &Path,
    checkpoint: &Path,
    index: Option<&Path>,
    split: Split,
    outputs: &RerankOutputs<'_>,
    s: &PipelineSettings,
) -> CliResult<()> {
    let config = s.to_config()?;
    let task = SyntheticTask::read_from_dir(dataset)?;
    let params = CmcParams::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let dim = task.model_dim();
    if params.model_dim() != dim {
        return Err(CliError::Data(format!(
            "checkpoint has dim {} but the dataset has dim {dim}",
            params.model_dim()
        )));
    }
    let index = match index {
        Some(path) => open_index(path)?,
        None => task.index()?,
    };
    if index.dim() != dim {
        return Err(CliError::Data(format!("index has dim {} but the dataset has dim {dim}", index.dim())));
    }
    let store = task.cmc_store();
    let encoder = Encoder::precomputed(dim);
    let queries: Vec<_> = match split {
        Split::Train => &task.train,
        Split::Test => &task.test,
    }
    .iter()
    .map(|q| q.to_pipeline_query())
    .collect();
    let mode = config.mode;
    let pipeline = Pipeline {
        index: &index,
        retriever_encoder: &encoder,
        cmc_encoder: &encoder,
        params: &params,
        candidates: &store,
        config,
        parallel_encode: false,
    };
    let batch = pipeline.run_batch(&queries);
    let records: Vec<_> = batch
        .results
        .iter()
        .filter_map(|r| match mode {
            Mode::Final => r.reranked_record(),
            Mode::Intermediate => r.final_record(),
        })
        .collect();
    write_atomic(outputs.records, records_to_text(&records).as_bytes())?;
    if let Some(path) = outputs.retrieved {
        let first: Vec<_> = batch.results.iter().filter_map(|r| r.retrieved_record()).collect();
        write_atomic(path, records_to_text(&first).as_bytes())?;
    }
    if let Some(path) = outputs.timings {
        write_atomic(path, results_to_text(&batch.results).as_bytes())?;
    }
    println!("reranked {} of {} queries", batch.results.len(), queries.len());
    if batch.errors.is_empty() {
        return Ok(());
    }
    let mut msg = format!("{} queries failed", batch.errors.len());
    for (id, e) in &batch.errors {
        let _ = write!(msg, "\n  query {id}: {e}");
    }
    Err(CliError::Data(msg))
}

fn percent(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn cmd_evaluate(records: &Path, out: Option<&Path>, s: &EvalSettings) -> CliResult<()> {
    let text = std::fs::read_to_string(records).map_err(|e| CliError::Data(format!("{}: {e}", records.display())))?;
    let table = compute_metrics(&parse_records(&text)?, &s.ks)?;
    println!("queries: {}", table.queries);
    println!("gold in pool: {}", table.in_pool);
    for (k, r) in &table.recall {
        println!("recall@{k}: {}", percent(*r));
    }
    println!("mrr@10: {:.4}", table.mrr_at_10);
    println!("accuracy (unnormalized): {}", percent(table.unnormalized_accuracy));
    match table.normalized_accuracy {
        Some(a) => println!("accuracy (normalized): {}", percent(a)),
        None => println!("accuracy (normalized): undefined, no gold in pool"),
    }
    if let Some(out) = out {
        write_atomic(out, table.to_csv().as_bytes())?;
    }
    Ok(())
}

fn cmd_bench(checkpoint: Option<&Path>, out: &Path, s: &BenchSettings) -> CliResult<()> {
    let params = match checkpoint {
        Some(path) => CmcParams::from_checkpoint(&Checkpoint::load(path)?)?,
        None => {
            let config = CmcConfig::with_dim(s.dim.unwrap_or(64), s.heads);
            CmcParams::init(&config, &mut ChaCha8Rng::seed_from_u64(s.seed))?
        }
    };
    let dim = s.dim.unwrap_or(params.model_dim());
    let report = bench_latency(&params, &s.ks, dim, s.repeats, s.seed)?;
    write_atomic(out, report.to_csv().as_bytes())?;
    for row in &report.rows {
        println!("K={:<6} median {:>12.1} us  p95 {:>12.1} us", row.k, row.median_us, row.p95_us);
    }
    for (k, why) in &report.failures {
        println!("K={k:<6} failed: {why}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

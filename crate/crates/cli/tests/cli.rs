use std::path::Path;
use std::process::{Command, Output};

fn cmc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

const SMALL_TASK: &[&str] = &[
    "--set", "n=200", "--set", "surface_dim=6", "--set", "latent_dim=2",
    "--set", "m=4", "--set", "train_queries=24", "--set", "test_queries=12",
];

const SMALL_TRAIN: &[&str] = &[
    "--epochs", "1", "--set", "k_train=8", "--set", "negative_pool_size=16",
    "--set", "heads=2", "--set", "lr=0.01",
];

fn args<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

#[test]
fn evaluate_prints_both_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let records = "0 10 1 10,11\n1 20 1 21,20\n2 30 1 31,30\n3 40 0 41\n4 50 0 51\n";
    std::fs::write(dir.path().join("records.txt"), records).unwrap();
    let o = ok(cmc(&["evaluate", "--records", "records.txt", "--k", "1,2", "--out", "m.csv"], dir.path()));
    let text = stdout(&o);
    assert!(text.contains("accuracy (unnormalized): 20.0%"), "{text}");
    assert!(text.contains("accuracy (normalized): 33.3%"), "{text}");
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(csv.contains("recall@2,0.600000"));
    assert_eq!(std::fs::read_to_string(dir.path().join("records.txt")).unwrap(), records);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmc(&["bench", "--frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(cmc(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(cmc(&[], dir.path()).status.code(), Some(1));
    assert_eq!(cmc(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn bad_settings_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let run = |a: &[&str]| cmc(a, dir.path()).status.code();
    assert_eq!(run(&["bench", "--k", "64,8"]), Some(1));
    assert_eq!(run(&["bench", "--set", "warp=9"]), Some(1));
    assert_eq!(run(&["bench", "--threads", "0"]), Some(1));
    assert_eq!(run(&["evaluate", "--records", "missing.txt"]), Some(1));
    assert_eq!(run(&["generate-synthetic", "--out", "d", "--set", "m=3"]), Some(1));
}

#[test]
fn malformed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.txt"), "1 2 x\n").unwrap();
    std::fs::write(dir.path().join("junk.cmcp"), b"CMCP\x01garbage").unwrap();
    std::fs::write(dir.path().join("emb.txt"), "1 0.5,0.5\n2 nope\n").unwrap();
    let run = |a: &[&str]| cmc(a, dir.path());
    let o = run(&["evaluate", "--records", "junk.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(run(&["bench", "--checkpoint", "junk.cmcp", "--k", "4"]).status.code(), Some(2));
    assert_eq!(run(&["build-index", "--embeddings", "emb.txt", "--out", "i.cmci"]).status.code(), Some(2));
    assert!(!dir.path().join("i.cmci").exists());
}

#[test]
fn bench_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    ok(cmc(&["bench", "--k", "8,128", "--dim", "16", "--set", "heads=2", "--out", "bench.csv"], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,median_us,p95_us,status");
    assert!(lines[1].starts_with("8,") && lines[2].starts_with("128,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn build_index_from_text_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("emb.txt"), "7 1,0\n3 0,1\n9 0.5,0.5\n").unwrap();
    let o = ok(cmc(&["build-index", "--embeddings", "emb.txt", "--out", "corpus.cmci"], dir.path()));
    assert!(stdout(&o).contains("indexed 3 embeddings of dim 2"));
    let index = cmc_core::index::open_index(&dir.path().join("corpus.cmci")).unwrap();
    assert_eq!(index.search_topk(&[1.0, 0.2], 1).unwrap().ids(), vec![7]);
    let o = cmc(&["build-index", "--embeddings", "emb.txt", "--out", "emb.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_workflow_is_reproducible() {
    let run_all = |dir: &Path| {
        ok(cmc(&args(&["generate-synthetic", "--out", "ds", "--seed", "5"], SMALL_TASK), dir));
        ok(cmc(&args(&["train", "--dataset", "ds", "--out", "model.cmcp", "--log", "log.csv"], SMALL_TRAIN), dir));
        ok(cmc(&["build-index", "--embeddings", "ds/corpus_retriever.cmce", "--out", "corpus.cmci"], dir));
        ok(cmc(
            &[
                "rerank", "--dataset", "ds", "--checkpoint", "model.cmcp", "--index", "corpus.cmci",
                "--out", "records.txt", "--retrieved", "first.txt", "--k-retrieve", "16", "--k-prime", "4",
            ],
            dir,
        ));
        ok(cmc(&["evaluate", "--records", "records.txt", "--out", "metrics.csv"], dir));
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    let model_before = std::fs::read(a.path().join("model.cmcp")).unwrap();
    run_all(b.path());
    for f in [
        "ds/spec.txt", "ds/corpus_cmc.cmce", "ds/test_gold.txt", "model.cmcp", "log.csv",
        "corpus.cmci", "records.txt", "first.txt", "metrics.csv",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    // Reranking and evaluating read the checkpoint without touching it.
    assert_eq!(std::fs::read(a.path().join("model.cmcp")).unwrap(), model_before);
    let records = std::fs::read_to_string(a.path().join("records.txt")).unwrap();
    assert_eq!(records.lines().count(), 12);
    assert!(records.lines().all(|l| l.split(' ').nth(3).unwrap().split(',').count() == 4));

    let other = tempfile::tempdir().unwrap();
    ok(cmc(&args(&["generate-synthetic", "--out", "ds", "--seed", "6"], SMALL_TASK), other.path()));
    assert_ne!(
        std::fs::read(a.path().join("ds/corpus_cmc.cmce")).unwrap(),
        std::fs::read(other.path().join("ds/corpus_cmc.cmce")).unwrap()
    );
}

#[test]
fn show_config_follows_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train.conf"), "epochs = 3\nk_train = 32\nseed = 11\nthreads = 2\n").unwrap();
    let o = ok(cmc(
        &["train", "--dataset", "ds", "--out", "m", "--config", "train.conf", "--epochs", "9", "--show-config"],
        dir.path(),
    ));
    let text = stdout(&o);
    assert!(text.contains("command = train\n"));
    assert!(text.contains("epochs = 9\n"), "flag beats file:\n{text}");
    assert!(text.contains("k_train = 32\n"), "file beats default:\n{text}");
    assert!(text.contains("seed = 11\n"));
    assert!(text.contains("threads = 2\n"));
    assert!(text.contains("batch_size = 4\n"), "default kept:\n{text}");

    let o = ok(cmc(&["train", "--dataset", "ds", "--out", "m", "--config", "train.conf", "--seed", "12", "--show-config"], dir.path()));
    assert!(stdout(&o).contains("seed = 12\n"));
    let o = ok(cmc(&["rerank", "--dataset", "d", "--checkpoint", "c", "--out", "o", "--show-config"], dir.path()));
    assert!(stdout(&o).contains("seed = 20240917\n"));
    assert!(!dir.path().join("m").exists());
}

#[test]
fn rerank_checks_its_settings_and_inputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(cmc(&args(&["generate-synthetic", "--out", "ds"], SMALL_TASK), dir.path()));
    ok(cmc(&args(&["train", "--dataset", "ds", "--out", "model.cmcp"], SMALL_TRAIN), dir.path()));
    let run = |extra: &[&str]| {
        cmc(&args(&["rerank", "--dataset", "ds", "--checkpoint", "model.cmcp", "--out", "r.txt"], extra), dir.path())
    };
    assert_eq!(run(&["--k-retrieve", "4", "--k-prime", "8"]).status.code(), Some(1));
    assert_eq!(run(&["--set", "mode=intermediate"]).status.code(), Some(1));
    ok(run(&["--set", "mode=intermediate", "--set", "scorer=gold", "--k-retrieve", "200", "--k-prime", "200"]));
    // With every candidate in the pool the gold oracle is always right.
    let o = ok(cmc(&["evaluate", "--records", "r.txt", "--k", "1"], dir.path()));
    assert!(stdout(&o).contains("accuracy (unnormalized): 100.0%"));

    std::fs::write(dir.path().join("bad.cmcp"), b"not a checkpoint").unwrap();
    let o = cmc(&["rerank", "--dataset", "ds", "--checkpoint", "bad.cmcp", "--out", "r2.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("r2.txt").exists());
}

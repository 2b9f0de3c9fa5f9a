mod common;

use cmc_core::eval::{generate_synthetic, SyntheticTaskSpec};
use cmc_core::training::{train, TrainingConfig, TrainingData};

fn quick_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        k_train: 8,
        negative_pool_size: 32,
        epochs: 2,
        base_lr: 1e-3,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let task = common::small_task(3);
    let examples = task.training_examples();
    let index = task.index().unwrap();
    let store = task.cmc_store();
    let data = TrainingData { examples: &examples, retriever: &index, candidates: &store };
    let mut params = common::params_for(&task, 1);
    let before = params.to_checkpoint().to_bytes();
    let cfg = TrainingConfig { base_lr: 0.0, ..quick_config(5) };
    let report = train(&cfg, &data, &mut params).unwrap();
    assert_eq!(report.epoch_losses.len(), 2);
    assert_eq!(params.to_checkpoint().to_bytes(), before);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let task = common::small_task(4);
    let examples = task.training_examples();
    let index = task.index().unwrap();
    let store = task.cmc_store();
    let data = TrainingData { examples: &examples, retriever: &index, candidates: &store };
    let run = || {
        let mut params = common::params_for(&task, 2);
        let report = train(&quick_config(9), &data, &mut params).unwrap();
        (params.to_checkpoint().to_bytes(), report.log_csv())
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    let mut other = common::params_for(&task, 2);
    train(&quick_config(10), &data, &mut other).unwrap();
    assert_ne!(other.to_checkpoint().to_bytes(), a);
}

#[test]
fn step_log_covers_every_batch() {
    let task = common::small_task(6);
    let examples = task.training_examples();
    let index = task.index().unwrap();
    let store = task.cmc_store();
    let data = TrainingData { examples: &examples, retriever: &index, candidates: &store };
    let cfg = TrainingConfig { batch_size: 7, ..quick_config(1) };
    let report = train(&cfg, &data, &mut common::params_for(&task, 3)).unwrap();
    let steps = cfg.total_steps(examples.len());
    assert_eq!(report.steps.len() as u64, steps);
    assert_eq!(report.steps.last().unwrap().step, steps);
    let csv = report.log_csv();
    assert_eq!(csv.lines().count() as u64, steps + 1);
    assert!(csv.starts_with("step,epoch,lr,loss\n"));
    assert_eq!(report.steps[0].lr, 0.0);
}

#[test]
fn checkpoints_are_written_per_epoch() {
    let task = common::small_task(8);
    let examples = task.training_examples();
    let index = task.index().unwrap();
    let store = task.cmc_store();
    let data = TrainingData { examples: &examples, retriever: &index, candidates: &store };
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainingConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..quick_config(2) };
    let mut params = common::params_for(&task, 4);
    train(&cfg, &data, &mut params).unwrap();
    let last = cmc_core::nn::Checkpoint::load(&dir.path().join("epoch2.cmcp")).unwrap();
    assert_eq!(last.to_bytes(), params.to_checkpoint().to_bytes());
    assert!(dir.path().join("epoch1.cmcp").exists());
}

#[test]
fn empty_dataset_is_rejected() {
    let task = common::small_task(1);
    let index = task.index().unwrap();
    let store = task.cmc_store();
    let data = TrainingData { examples: &[], retriever: &index, candidates: &store };
    let err = train(&quick_config(0), &data, &mut common::params_for(&task, 0)).unwrap_err();
    assert!(matches!(err, cmc_core::Error::InvalidInput(_)));
}

#[test]
fn loss_falls_on_the_default_synthetic_task() {
    let task = generate_synthetic(&SyntheticTaskSpec::default()).unwrap();
    let examples = task.training_examples();
    let index = task.index().unwrap();
    let store = task.cmc_store();
    let data = TrainingData { examples: &examples, retriever: &index, candidates: &store };
    let mut params = common::params_for(&task, cmc_core::DEFAULT_SEED);
    let report = train(&common::experiment_config(cmc_core::DEFAULT_SEED), &data, &mut params).unwrap();
    eprintln!("epoch losses: {:?}", report.epoch_losses);
    assert_eq!(report.epoch_losses.len(), 3);
    assert!(report.epoch_losses[2] < report.epoch_losses[0]);
}

//! Benchmark loading and the fine-tune/evaluate/repeat protocol on toy
//! fixtures.

use std::collections::BTreeMap;

use crisisvit::benchmark::{
    evaluate, finetune, load_benchmark, repeat_runs, FinetuneSchedule, Split, TaskId, TaskSpec,
};
use crisisvit::data::vocab::LabelVocabulary;
use crisisvit::error::Error;
use crisisvit::fixtures;
use crisisvit::images::Normalization;
use crisisvit::ledger::RunLedger;
use crisisvit::trainer::TrainSchedule;
use crisisvit::vit::{build_model, ModelConfig};

#[test]
fn intact_benchmark_loads_with_expected_class_counts() {
    let dir = tempfile::tempdir().unwrap();
    fixtures::write_benchmark_dir(dir.path(), 8, 16, 5).unwrap();
    let (tasks, report) = load_benchmark(dir.path()).unwrap();
    assert_eq!(tasks.len(), 4);
    let counts: Vec<usize> = tasks.iter().map(|t| t.classes.len()).collect();
    assert_eq!(counts, vec![7, 2, 4, 3]);
    assert!(report.violations.is_empty());
    assert_eq!(report.task_counts["disaster_types"]["train"], 8);
}

#[test]
fn duplicate_id_across_splits_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    fixtures::write_benchmark_dir(dir.path(), 4, 16, 5).unwrap();
    // copy one train record into the test split under the same id
    let train_path = dir.path().join("disaster_types/train.jsonl");
    let test_path = dir.path().join("disaster_types/test.jsonl");
    let first_train_line = std::fs::read_to_string(&train_path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let mut test_contents = std::fs::read_to_string(&test_path).unwrap();
    test_contents.push_str(&first_train_line);
    test_contents.push('\n');
    std::fs::write(&test_path, test_contents).unwrap();

    let (_, report) = load_benchmark(dir.path()).unwrap();
    assert!(report
        .violations
        .iter()
        .any(|v| v.contains("disaster_types") && v.contains("train") && v.contains("test")));
}

#[test]
fn empty_test_split_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fixtures::write_benchmark_dir(dir.path(), 4, 16, 5).unwrap();
    std::fs::write(dir.path().join("humanitarian/test.jsonl"), "").unwrap();
    match load_benchmark(dir.path()) {
        Err(Error::Data(msg)) => {
            assert!(msg.contains("humanitarian"));
            assert!(msg.contains("test"));
        }
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn missing_split_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fixtures::write_benchmark_dir(dir.path(), 4, 16, 5).unwrap();
    std::fs::remove_file(dir.path().join("informativeness/validation.jsonl")).unwrap();
    match load_benchmark(dir.path()) {
        Err(Error::Data(msg)) => assert!(msg.contains("informativeness")),
        other => panic!("expected data error, got {other:?}"),
    }
}

fn toy_task(
    task_id: TaskId,
    per_split: usize,
    seed: u64,
) -> (TaskSpec, crisisvit::images::MemoryImageProvider) {
    let (bench, provider) = fixtures::toy_benchmark(per_split, 16, seed);
    (
        TaskSpec {
            task_id,
            classes: LabelVocabulary::for_task(task_id),
            split_paths: BTreeMap::new(),
            splits: bench[&task_id].clone(),
        },
        provider,
    )
}

#[test]
fn finetune_produces_task_width_head_and_recomputable_result() {
    let (task, provider) = toy_task(TaskId::DamageSeverity, 12, 3);
    let base = build_model(&ModelConfig::tiny(0), 0).unwrap();
    let schedule = FinetuneSchedule {
        epochs: 2,
        batch_size: 12,
        schedule: TrainSchedule::with_learning_rate(5e-4),
        ..FinetuneSchedule::default()
    };
    let norm = Normalization::unit();
    let (model, val_run) = finetune(
        &base,
        &task,
        &schedule,
        1,
        &provider,
        &norm,
        &RunLedger::disabled(),
    )
    .unwrap();
    assert_eq!(model.model_config.num_classes, 3);
    assert_eq!(val_run.split, Split::Validation);
    assert_eq!(val_run.recompute_accuracy(), val_run.accuracy);
    assert!(val_run.provenance_digest.contains('/'));
}

#[test]
fn two_seeds_share_lineage_prefix() {
    let (task, provider) = toy_task(TaskId::Informativeness, 8, 9);
    let base = build_model(&ModelConfig::tiny(0), 0).unwrap();
    let schedule = FinetuneSchedule {
        epochs: 1,
        batch_size: 8,
        schedule: TrainSchedule::with_learning_rate(5e-4),
        ..FinetuneSchedule::default()
    };
    let norm = Normalization::unit();
    let ledger = RunLedger::disabled();
    let (_, run_a) = finetune(&base, &task, &schedule, 1, &provider, &norm, &ledger).unwrap();
    let (_, run_b) = finetune(&base, &task, &schedule, 2, &provider, &norm, &ledger).unwrap();
    assert_ne!(run_a.seed, run_b.seed);
    let prefix = |s: &str| s.split('/').next().unwrap().to_string();
    assert_eq!(
        prefix(&run_a.provenance_digest),
        prefix(&run_b.provenance_digest)
    );
    assert_ne!(run_a.provenance_digest, run_b.provenance_digest);
}

#[test]
fn evaluate_is_deterministic_and_head_mismatch_rejected() {
    let (task, provider) = toy_task(TaskId::Humanitarian, 8, 11);
    let norm = Normalization::unit();
    let four = build_model(&ModelConfig::tiny(4), 2).unwrap();
    let a = evaluate(&four, &task, Split::Test, &provider, &norm).unwrap();
    let b = evaluate(&four, &task, Split::Test, &provider, &norm).unwrap();
    assert_eq!(a.examples, b.examples);
    assert_eq!(a.accuracy, b.accuracy);

    let wrong = build_model(&ModelConfig::tiny(5), 2).unwrap();
    assert!(matches!(
        evaluate(&wrong, &task, Split::Test, &provider, &norm),
        Err(Error::Config { .. })
    ));
}

#[test]
fn evaluate_rejects_normalization_mismatch() {
    let (task, provider) = toy_task(TaskId::Informativeness, 8, 21);
    let base = build_model(&ModelConfig::tiny(0), 0).unwrap();
    let schedule = FinetuneSchedule {
        epochs: 1,
        batch_size: 8,
        schedule: TrainSchedule::with_learning_rate(5e-4),
        ..FinetuneSchedule::default()
    };
    let trained_norm = Normalization::unit();
    let (model, _) = finetune(
        &base,
        &task,
        &schedule,
        1,
        &provider,
        &trained_norm,
        &RunLedger::disabled(),
    )
    .unwrap();
    let other = Normalization {
        mean: vec![0.5, 0.5, 0.5],
        std: vec![0.5, 0.5, 0.5],
    };
    match evaluate(&model, &task, Split::Test, &provider, &other) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "normalization"),
        other => panic!("expected normalization mismatch, got {other:?}"),
    }
}

#[test]
fn repeat_runs_reports_mean_and_zero_variance_on_fixed_seed() {
    let (task, provider) = toy_task(TaskId::Informativeness, 8, 13);
    let base = build_model(&ModelConfig::tiny(0), 0).unwrap();
    let schedule = FinetuneSchedule {
        epochs: 1,
        batch_size: 8,
        schedule: TrainSchedule::with_learning_rate(5e-4),
        ..FinetuneSchedule::default()
    };
    let norm = Normalization::unit();
    let ledger = RunLedger::disabled();
    let out = tempfile::tempdir().unwrap();
    let (runs, mean) = repeat_runs(
        &base,
        &task,
        &schedule,
        3,
        &[7, 8, 9],
        false,
        &provider,
        &norm,
        &ledger,
        Some(out.path()),
    )
    .unwrap();
    assert_eq!(runs.len(), 3);
    for seed in [7, 8, 9] {
        let loaded =
            crisisvit::benchmark::RunResult::load(&out.path().join(format!("seed{seed}.json")))
                .unwrap();
        assert_eq!(loaded.seed, seed);
    }
    let expected = runs.iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
    assert!((mean - expected).abs() < 1e-15);

    // identical seeds in deterministic execution: zero variance
    let (runs2, _) = repeat_runs(
        &base,
        &task,
        &schedule,
        3,
        &[7, 7, 7],
        false,
        &provider,
        &norm,
        &ledger,
        None,
    )
    .unwrap();
    assert!(runs2.windows(2).all(|w| w[0].accuracy == w[1].accuracy));
    assert!(runs2.windows(2).all(|w| w[0].examples == w[1].examples));
}

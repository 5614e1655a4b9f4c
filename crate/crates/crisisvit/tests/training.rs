//! End-to-end training behavior at desk scale: supervised pre-training
//! beats chance, stage composition threads provenance, and sequential
//! binary pre-training transfers worse than multi-class pre-training.

use crisisvit::benchmark::{finetune, FinetuneSchedule, Split, TaskId};
use crisisvit::data::resolve::resolve_single_label;
use crisisvit::data::vocab::LabelVocabulary;
use crisisvit::fixtures;
use crisisvit::images::Normalization;
use crisisvit::ledger::RunLedger;
use crisisvit::pretrain::{
    build_binary_tasks, compose_stages, pretrain_multiclass, BaseSource, PretrainContext,
    PretrainStrategy, StageSpec, StrategyKind,
};
use crisisvit::trainer::TrainSchedule;
use crisisvit::vit::ModelConfig;

fn tiny_config() -> ModelConfig {
    ModelConfig::tiny(0)
}

#[test]
fn multiclass_places_beats_chance_on_heldout() {
    let vocab = LabelVocabulary::place();
    let (entries, provider) = fixtures::labeled_corpus(&vocab, 500, 16, 42);
    let examples = resolve_single_label(&entries, &vocab).unwrap();
    let base = crisisvit::vit::build_model(&tiny_config(), 1).unwrap();
    let strategy = PretrainStrategy {
        batch_size: 64,
        ..PretrainStrategy::new(StrategyKind::MulticlassPlaces, 10, 7)
    };
    let schedule = TrainSchedule::with_learning_rate(3e-4);
    let (model, metrics) = pretrain_multiclass(
        base,
        &examples,
        &vocab,
        &strategy,
        &schedule,
        &provider,
        &Normalization::unit(),
        &RunLedger::disabled(),
        "fixture",
    )
    .unwrap();
    assert_eq!(model.model_config.num_classes, 49);
    let final_acc = *metrics.heldout_accuracy.last().unwrap();
    let chance = 1.0 / 49.0;
    assert!(
        final_acc > chance,
        "held-out accuracy {final_acc} not above chance {chance}"
    );
    // the last provenance record describes this stage
    let last = model.provenance.last().unwrap();
    assert_eq!(last.strategy, "multiclass_places");
    assert_eq!(last.vocabulary_digest.as_deref(), Some(vocab.digest()));
}

#[test]
fn compose_ssl_then_places_has_two_stage_provenance() {
    let vocab = LabelVocabulary::place();
    let (entries, provider) = fixtures::labeled_corpus(&vocab, 64, 16, 3);
    let ledger = RunLedger::disabled();
    let ctx = PretrainContext {
        entries: &entries,
        provider: &provider,
        normalization: Normalization::unit(),
        ledger: &ledger,
        dataset: "fixture".into(),
        binary_negative_ratio: 1.0,
        ssl_positive_only: false,
        expected_config: None,
    };
    let stages = vec![
        StageSpec::Ssl(crisisvit::mae::SslTrainConfig {
            epochs: 1,
            batch_size: 32,
            decoder_depth: 1,
            decoder_dim: 16,
            seed: 2,
            ..crisisvit::mae::SslTrainConfig::default()
        }),
        StageSpec::Supervised {
            strategy: PretrainStrategy {
                batch_size: 32,
                ..PretrainStrategy::new(StrategyKind::MulticlassPlaces, 1, 5)
            },
            schedule: TrainSchedule::default(),
        },
    ];
    let model = compose_stages(
        BaseSource::Fresh {
            config: tiny_config(),
            seed: 0,
        },
        &stages,
        &ctx,
    )
    .unwrap();
    assert_eq!(model.provenance.len(), 2);
    assert_eq!(model.provenance[0].strategy, "self_supervised");
    assert_eq!(model.provenance[1].strategy, "multiclass_places");
}

#[test]
fn compose_from_external_checkpoint_keeps_its_provenance() {
    let vocab = LabelVocabulary::place();
    let (entries, provider) = fixtures::labeled_corpus(&vocab, 92, 16, 9);
    let dir = tempfile::tempdir().unwrap();

    // an externally produced encoder with its own training history
    let mut external = crisisvit::vit::build_model(&tiny_config(), 11).unwrap();
    external.push_provenance(crisisvit::checkpoint::ProvenanceRecord::stage(
        "external_base",
        "multiclass_1k",
        20,
        0,
    ));
    let path = dir.path().join("external.cvck");
    external.save(&path).unwrap();

    let ledger = RunLedger::disabled();
    let ctx = PretrainContext {
        entries: &entries,
        provider: &provider,
        normalization: Normalization::unit(),
        ledger: &ledger,
        dataset: "fixture".into(),
        binary_negative_ratio: 1.0,
        ssl_positive_only: false,
        expected_config: None,
    };
    let stages = vec![StageSpec::Supervised {
        strategy: PretrainStrategy {
            batch_size: 32,
            ..PretrainStrategy::new(StrategyKind::MulticlassJoint, 1, 5)
        },
        schedule: TrainSchedule::default(),
    }];
    let model = compose_stages(BaseSource::External { path }, &stages, &ctx).unwrap();
    assert_eq!(model.provenance.len(), 2);
    assert_eq!(model.provenance[0].strategy, "multiclass_1k");
    assert_eq!(model.provenance[1].strategy, "multiclass_joint");
    assert_eq!(model.model_config.num_classes, 92);
}

/// Sequential binary pre-training ends tuned to its last one-vs-rest
/// tasks, so a short downstream fine-tune from it should trail one from
/// multi-class pre-training on the same corpus (the catastrophic-forgetting
/// direction). The fixture codes each class into a disjoint pixel cell, so
/// classes really are separate lessons that can be overwritten.
#[test]
fn binary_sequential_transfers_worse_than_multiclass() {
    let places = LabelVocabulary::place();
    let joint = LabelVocabulary::joint();
    let (entries, provider) = fixtures::positional_corpus(&places, 490, 16, 21);
    let examples = resolve_single_label(&entries, &places).unwrap();
    let norm = Normalization::unit();
    let ledger = RunLedger::disabled();

    let base = crisisvit::vit::build_model(&tiny_config(), 3).unwrap();
    let (multiclass_ckpt, _) = pretrain_multiclass(
        base.clone(),
        &examples,
        &places,
        &PretrainStrategy {
            batch_size: 64,
            ..PretrainStrategy::new(StrategyKind::MulticlassPlaces, 30, 7)
        },
        &TrainSchedule::with_learning_rate(1e-3),
        &provider,
        &norm,
        &ledger,
        "fixture",
    )
    .unwrap();
    let tasks = build_binary_tasks(&entries, &joint, 1.0, 7).unwrap();
    let (binary_ckpt, stages) = crisisvit::pretrain::pretrain_binary_sequential(
        base,
        &joint,
        &tasks,
        &PretrainStrategy {
            batch_size: 64,
            ..PretrainStrategy::new(StrategyKind::BinarySequential, 2, 7)
        },
        &TrainSchedule::with_learning_rate(1e-3),
        &provider,
        &norm,
        &ledger,
        "fixture",
    )
    .unwrap();
    // all 49 place classes trained; the 43 incident classes have no
    // positives in this corpus and are skipped
    assert_eq!(stages.iter().filter(|s| !s.skipped).count(), 49);

    // downstream task reuses the cells of the earliest-trained classes,
    // which are the ones sequential training had the longest to overwrite
    let task_id = TaskId::DisasterTypes;
    let cells: Vec<usize> = (0..7)
        .map(|j| joint.index_of(&places.classes()[j]).unwrap())
        .collect();
    let (splits, bench_provider) = fixtures::positional_task_records(task_id, &cells, 42, 16, 33);
    let task = crisisvit::benchmark::TaskSpec {
        task_id,
        classes: LabelVocabulary::for_task(task_id),
        split_paths: Default::default(),
        splits,
    };
    let schedule = FinetuneSchedule {
        epochs: 3,
        batch_size: 14,
        schedule: TrainSchedule::with_learning_rate(5e-4),
        ..FinetuneSchedule::default()
    };
    let (m_model, _) = finetune(
        &multiclass_ckpt,
        &task,
        &schedule,
        1,
        &bench_provider,
        &norm,
        &ledger,
    )
    .unwrap();
    let (b_model, _) = finetune(
        &binary_ckpt,
        &task,
        &schedule,
        1,
        &bench_provider,
        &norm,
        &ledger,
    )
    .unwrap();
    let m_acc =
        crisisvit::benchmark::evaluate(&m_model, &task, Split::Test, &bench_provider, &norm)
            .unwrap()
            .accuracy;
    let b_acc =
        crisisvit::benchmark::evaluate(&b_model, &task, Split::Test, &bench_provider, &norm)
            .unwrap()
            .accuracy;
    assert!(
        b_acc < m_acc,
        "binary-sequential transfer ({b_acc}) should trail multiclass transfer ({m_acc})"
    );
}

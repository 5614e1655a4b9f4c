//! The four downstream classification tasks: loading benchmark splits,
//! fine-tuning a checkpoint per task, and scoring test-set predictions.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParameterCheckpoint, ProvenanceRecord};
use crate::data::vocab::LabelVocabulary;
use crate::error::{Error, Result};
use crate::images::{ImageProvider, Normalization};
use crate::ledger::{LedgerEvent, RunLedger};
use crate::trainer::{batches, epoch_order, AdamState, OptimizerSettings, TrainSchedule};
use crate::vit::{argmax_row, build_classifier_loss, forward_logits, replace_head};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    DisasterTypes,
    Informativeness,
    Humanitarian,
    DamageSeverity,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::DisasterTypes,
        TaskId::Informativeness,
        TaskId::Humanitarian,
        TaskId::DamageSeverity,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::DisasterTypes => "disaster_types",
            TaskId::Informativeness => "informativeness",
            TaskId::Humanitarian => "humanitarian",
            TaskId::DamageSeverity => "damage_severity",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        match s {
            "disaster_types" => Ok(TaskId::DisasterTypes),
            "informativeness" => Ok(TaskId::Informativeness),
            "humanitarian" => Ok(TaskId::Humanitarian),
            "damage_severity" => Ok(TaskId::DamageSeverity),
            other => Err(Error::config("task", format!("unknown task {other}"))),
        }
    }

    pub fn class_names(&self) -> &'static [&'static str] {
        match self {
            TaskId::DisasterTypes => &[
                "earthquake",
                "fire",
                "flood",
                "hurricane",
                "landslide",
                "other_disaster",
                "not_disaster",
            ],
            TaskId::Informativeness => &["informative", "not_informative"],
            TaskId::Humanitarian => &[
                "affected_injured_or_dead_people",
                "infrastructure_and_utility_damage",
                "rescue_volunteering_or_donation_effort",
                "not_humanitarian",
            ],
            TaskId::DamageSeverity => &["severe_damage", "mild_damage", "little_or_none"],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One labeled benchmark example: an id, an image reference understood by
/// the active [`ImageProvider`], and a class name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub classes: LabelVocabulary,
    pub split_paths: BTreeMap<Split, PathBuf>,
    pub splits: BTreeMap<Split, Vec<BenchmarkRecord>>,
}

impl TaskSpec {
    pub fn split(&self, split: Split) -> &[BenchmarkRecord] {
        self.splits.get(&split).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub task_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub violations: Vec<String>,
    pub rejected_records: Vec<String>,
}

fn read_split_file(
    path: &Path,
    vocab: &LabelVocabulary,
    report: &mut IntegrityReport,
) -> Result<Vec<BenchmarkRecord>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("missing split file {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BenchmarkRecord>(&line) {
            Ok(r) => {
                if vocab.contains(&r.label) {
                    records.push(r);
                } else {
                    report.rejected_records.push(format!(
                        "{}:{}: unknown class name {}",
                        path.display(),
                        i + 1,
                        r.label
                    ));
                }
            }
            Err(e) => report
                .rejected_records
                .push(format!("{}:{}: {e}", path.display(), i + 1)),
        }
    }
    Ok(records)
}

/// Load the benchmark from `root/<task>/{train,validation,test}.jsonl`.
/// Missing or empty splits are hard errors; disjointness violations and
/// unknown-class rejections are flagged in the report.
pub fn load_benchmark(root: &Path) -> Result<(Vec<TaskSpec>, IntegrityReport)> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "benchmark directory {} not found",
            root.display()
        )));
    }
    let mut report = IntegrityReport::default();
    let mut tasks = Vec::new();
    for task_id in TaskId::ALL {
        let vocab = LabelVocabulary::for_task(task_id);
        let mut split_paths = BTreeMap::new();
        let mut splits = BTreeMap::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let path = root
                .join(task_id.as_str())
                .join(format!("{}.jsonl", split.as_str()));
            let records = read_split_file(&path, &vocab, &mut report)?;
            if records.is_empty() {
                return Err(Error::Data(format!(
                    "task {} split {} is empty",
                    task_id.as_str(),
                    split.as_str()
                )));
            }
            split_paths.insert(split, path);
            splits.insert(split, records);
        }

        let mut ids: BTreeMap<Split, HashSet<&str>> = BTreeMap::new();
        for (split, records) in &splits {
            ids.insert(*split, records.iter().map(|r| r.id.as_str()).collect());
        }
        for (a, b) in [
            (Split::Train, Split::Validation),
            (Split::Train, Split::Test),
            (Split::Validation, Split::Test),
        ] {
            let overlap: Vec<&str> = ids[&a].intersection(&ids[&b]).copied().collect();
            for id in overlap {
                report.violations.push(format!(
                    "task {}: image id {} appears in both {} and {}",
                    task_id.as_str(),
                    id,
                    a.as_str(),
                    b.as_str()
                ));
            }
        }

        let mut counts = BTreeMap::new();
        for (split, records) in &splits {
            counts.insert(split.as_str().to_string(), records.len());
        }
        report
            .task_counts
            .insert(task_id.as_str().to_string(), counts);
        tasks.push(TaskSpec {
            task_id,
            classes: vocab,
            split_paths,
            splits,
        });
    }
    Ok((tasks, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub true_class: usize,
    pub predicted_class: usize,
}

/// Outcome of one fine-tune/evaluate execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task_id: TaskId,
    pub split: Split,
    pub seed: u64,
    /// `<base recipe digest>/<fine-tune digest>`: the prefix identifies the
    /// pre-trained checkpoint lineage and is shared across seeds.
    pub provenance_digest: String,
    pub examples: Vec<PredictionRecord>,
    pub accuracy: f64,
    pub wall_time_secs: f64,
}

impl RunResult {
    /// Accuracy recomputed from the stored per-example pairs; must always
    /// equal the stored value exactly.
    pub fn recompute_accuracy(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let correct = self
            .examples
            .iter()
            .filter(|e| e.true_class == e.predicted_class)
            .count();
        correct as f64 / self.examples.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        // companion per-example prediction file
        let mut preds = File::create(path.with_extension("preds.tsv"))?;
        writeln!(preds, "id\ttrue\tpredicted")?;
        for e in &self.examples {
            writeln!(preds, "{}\t{}\t{}", e.id, e.true_class, e.predicted_class)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunResult> {
        let json = std::fs::read_to_string(path)?;
        let result: RunResult = serde_json::from_str(&json)?;
        if (result.recompute_accuracy() - result.accuracy).abs() > 1e-12 {
            return Err(Error::Integrity(format!(
                "stored accuracy {} does not match predictions in {}",
                result.accuracy,
                path.display()
            )));
        }
        Ok(result)
    }
}

/// Fine-tune hyperparameters. Only pre-training length is pinned by the
/// experimental protocol; fine-tuning length is a declared toolkit choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerSettings,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        FinetuneSchedule {
            epochs: 10,
            batch_size: 128,
            schedule: TrainSchedule::with_learning_rate(5e-5),
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl FinetuneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        self.schedule.validate()
    }
}

fn digest_of(records: &[ProvenanceRecord]) -> String {
    use sha2::Digest;
    let json = serde_json::to_string(records).expect("provenance serializes");
    hex::encode(sha2::Sha256::digest(json.as_bytes()))
}

fn lineage_digest(base: &ParameterCheckpoint, finetuned: &ParameterCheckpoint) -> String {
    let base_digest = digest_of(&base.provenance);
    let tail = &finetuned.provenance[base.provenance.len()..];
    format!("{}/{}", base_digest, digest_of(tail))
}

fn class_index(vocab: &LabelVocabulary, record: &BenchmarkRecord) -> Result<usize> {
    vocab.index_of(&record.label).ok_or_else(|| {
        Error::Vocabulary(format!(
            "record {}: unknown class {}",
            record.id, record.label
        ))
    })
}

/// Evaluate a checkpoint on one split. Deterministic: no train-time
/// stochasticity touches this path, and predictions are stored per example.
/// The normalization must match whatever the checkpoint was trained with.
pub fn evaluate(
    checkpoint: &ParameterCheckpoint,
    task: &TaskSpec,
    split: Split,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
) -> Result<RunResult> {
    if checkpoint.model_config.num_classes != task.classes.len() {
        return Err(Error::config(
            "num_classes",
            format!(
                "checkpoint head width {} does not match task {} ({} classes)",
                checkpoint.model_config.num_classes,
                task.task_id.as_str(),
                task.classes.len()
            ),
        ));
    }
    if let Some(trained_with) = checkpoint
        .provenance
        .iter()
        .rev()
        .find_map(|r| r.normalization.as_ref())
    {
        if trained_with != normalization {
            return Err(Error::config(
                "normalization",
                format!(
                    "evaluation normalization {normalization:?} differs from the checkpoint's training normalization {trained_with:?}"
                ),
            ));
        }
    }
    let records = task.split(split);
    if records.is_empty() {
        return Err(Error::Data(format!(
            "task {} has no {} records",
            task.task_id.as_str(),
            split.as_str()
        )));
    }
    let start = Instant::now();
    let mut examples = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let refs: Vec<String> = chunk.iter().map(|r| r.image.clone()).collect();
        let batch = provider.load_batch(&refs, normalization.clone())?;
        let logits = forward_logits(checkpoint, &batch)?;
        for (i, record) in chunk.iter().enumerate() {
            examples.push(PredictionRecord {
                id: record.id.clone(),
                true_class: class_index(&task.classes, record)?,
                predicted_class: argmax_row(logits.row(i)),
            });
        }
    }
    let correct = examples
        .iter()
        .filter(|e| e.true_class == e.predicted_class)
        .count();
    let accuracy = correct as f64 / examples.len() as f64;
    Ok(RunResult {
        task_id: task.task_id,
        split,
        seed: 0,
        provenance_digest: format!("{}/", digest_of(&checkpoint.provenance)),
        examples,
        accuracy,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn accuracy_on(
    checkpoint: &ParameterCheckpoint,
    task: &TaskSpec,
    split: Split,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
) -> Result<f64> {
    Ok(evaluate(checkpoint, task, split, provider, normalization)?.accuracy)
}

/// Fine-tune a checkpoint for one task: replace the head, train on the
/// train split, and keep the epoch with the best validation accuracy.
/// Returns the selected checkpoint and its validation-run result.
pub fn finetune(
    checkpoint: &ParameterCheckpoint,
    task: &TaskSpec,
    schedule: &FinetuneSchedule,
    seed: u64,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
    ledger: &RunLedger,
) -> Result<(ParameterCheckpoint, RunResult)> {
    schedule.validate()?;
    normalization.validate(checkpoint.model_config.channels)?;
    let stage = format!("finetune:{}", task.task_id.as_str());
    let start = Instant::now();

    let mut model = replace_head(checkpoint, task.classes.len(), seed)?;
    let train_records = task.split(Split::Train);
    if train_records.is_empty() {
        return Err(Error::Data(format!(
            "task {} has no training records",
            task.task_id.as_str()
        )));
    }
    let labels: Vec<usize> = train_records
        .iter()
        .map(|r| class_index(&task.classes, r))
        .collect::<Result<_>>()?;
    // held-out examples must never feed a parameter update
    let held_out: HashSet<&str> = task
        .split(Split::Validation)
        .iter()
        .chain(task.split(Split::Test))
        .map(|r| r.id.as_str())
        .collect();

    let mut adam = AdamState::new(&model.params, schedule.optimizer.clone());
    let steps_per_epoch = train_records.len().div_ceil(schedule.batch_size);
    let total_steps = steps_per_epoch * schedule.epochs;
    let mut global_step = 0usize;

    let mut best: Option<(f64, ParameterCheckpoint)> = None;
    ledger.append(LedgerEvent::StageStart {
        stage: stage.clone(),
        fingerprint: String::new(),
    })?;
    for epoch in 0..schedule.epochs {
        let order = epoch_order(train_records.len(), seed, epoch);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch_idx in batches(&order, schedule.batch_size) {
            for &i in &batch_idx {
                if held_out.contains(train_records[i].id.as_str()) {
                    return Err(Error::Integrity(format!(
                        "example {} is in a held-out split but reached a training batch",
                        train_records[i].id
                    )));
                }
            }
            let refs: Vec<String> = batch_idx
                .iter()
                .map(|&i| train_records[i].image.clone())
                .collect();
            let batch_labels: Vec<usize> = batch_idx.iter().map(|&i| labels[i]).collect();
            let batch = provider.load_batch(&refs, normalization.clone())?;
            let step = build_classifier_loss(
                &model,
                &batch.pixels,
                &batch_labels,
                schedule.schedule.label_smoothing,
            )?;
            let loss_value = step.graph.value(step.loss).iter().next().copied().unwrap();
            let mut grads = step.graph.backward(step.loss)?;
            let mut grad_vec: Vec<Option<crate::graph::Tensor>> =
                step.params.ids.iter().map(|&id| grads.take(id)).collect();
            let lr = schedule.schedule.lr_at(global_step, total_steps);
            adam.step(
                &mut model.params,
                &mut grad_vec,
                lr,
                schedule.schedule.grad_clip,
            );
            global_step += 1;
            epoch_loss += loss_value;
            steps += 1;
        }
        let val_acc = accuracy_on(&model, task, Split::Validation, provider, normalization)?;
        ledger.append(LedgerEvent::EpochMetric {
            stage: stage.clone(),
            epoch,
            step: global_step,
            loss: epoch_loss / steps.max(1) as f64,
            accuracy: Some(val_acc),
            wall_time: start.elapsed().as_secs_f64(),
        })?;
        let improved = best.as_ref().is_none_or(|(acc, _)| val_acc > *acc);
        if improved {
            best = Some((val_acc, model.clone()));
        }
    }

    let (_, mut selected) = best.expect("at least one epoch ran");
    selected.push_provenance(
        ProvenanceRecord::stage(task.task_id.as_str(), "finetune", schedule.epochs, seed)
            .with_vocabulary(task.classes.digest())
            .with_normalization(normalization.clone()),
    );
    let mut val_run = evaluate(&selected, task, Split::Validation, provider, normalization)?;
    val_run.seed = seed;
    val_run.provenance_digest = lineage_digest(checkpoint, &selected);
    val_run.wall_time_secs = start.elapsed().as_secs_f64();
    ledger.append(LedgerEvent::StageFinish {
        stage,
        fingerprint: String::new(),
        checkpoint_digest: selected.digest()?,
        wall_time: start.elapsed().as_secs_f64(),
    })?;
    Ok((selected, val_run))
}

/// The repeated-run protocol: fine-tune with `n_runs` different seeds and
/// report each test-set result plus the arithmetic mean accuracy. At
/// least three runs are required unless explicitly overridden. When
/// `out_dir` is given, every run result is persisted there as
/// `seed<N>.json` plus its prediction file.
#[allow(clippy::too_many_arguments)]
pub fn repeat_runs(
    base: &ParameterCheckpoint,
    task: &TaskSpec,
    schedule: &FinetuneSchedule,
    n_runs: usize,
    seeds: &[u64],
    allow_fewer_runs: bool,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
    ledger: &RunLedger,
    out_dir: Option<&Path>,
) -> Result<(Vec<RunResult>, f64)> {
    if n_runs < 1 {
        return Err(Error::config("n_runs", "must be at least 1"));
    }
    if n_runs < 3 && !allow_fewer_runs {
        return Err(Error::config(
            "n_runs",
            format!("protocol requires at least 3 runs, got {n_runs} (set the override to bypass)"),
        ));
    }
    if seeds.len() < n_runs {
        return Err(Error::config(
            "seeds",
            format!("need {n_runs} seeds, got {}", seeds.len()),
        ));
    }
    let mut runs = Vec::with_capacity(n_runs);
    for &seed in seeds.iter().take(n_runs) {
        let (model, _) = finetune(base, task, schedule, seed, provider, normalization, ledger)?;
        let mut test_run = evaluate(&model, task, Split::Test, provider, normalization)?;
        test_run.seed = seed;
        test_run.provenance_digest = lineage_digest(base, &model);
        ledger.append(LedgerEvent::RunRecorded {
            task: task.task_id.as_str().to_string(),
            seed,
            accuracy: test_run.accuracy,
        })?;
        if let Some(dir) = out_dir {
            test_run.save(&dir.join(format!("seed{seed}.json")))?;
        }
        runs.push(test_run);
    }
    let mean = runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len() as f64;
    Ok((runs, mean))
}

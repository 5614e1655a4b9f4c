//! Supervised pre-training strategies over the incident corpus: one-vs-rest
//! binary tasks trained in sequence, multi-class training over the incident
//! or place label space, the joint 92-way space, and stage composition that
//! threads a checkpoint through self-supervised and supervised stages.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParameterCheckpoint, ProvenanceRecord};
use crate::data::resolve::{train_val_split, BinaryTask, ResolvedExample};
use crate::data::vocab::LabelVocabulary;
use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::images::{ImageProvider, Normalization};
use crate::ledger::{LedgerEvent, RunLedger};
use crate::mae::{pretrain_ssl_from, SslTrainConfig};
use crate::trainer::{batches, epoch_order, AdamState, OptimizerSettings, TrainSchedule};
use crate::vit::{
    argmax_row, build_classifier_loss, expected_param_specs, forward_logits, is_head_param,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    BinarySequential,
    MulticlassIncident,
    MulticlassPlaces,
    MulticlassJoint,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::BinarySequential => "binary_sequential",
            StrategyKind::MulticlassIncident => "multiclass_incident",
            StrategyKind::MulticlassPlaces => "multiclass_places",
            StrategyKind::MulticlassJoint => "multiclass_joint",
        }
    }

    pub fn parse(s: &str) -> Result<StrategyKind> {
        match s {
            "binary_sequential" => Ok(StrategyKind::BinarySequential),
            "multiclass_incident" => Ok(StrategyKind::MulticlassIncident),
            "multiclass_places" => Ok(StrategyKind::MulticlassPlaces),
            "multiclass_joint" => Ok(StrategyKind::MulticlassJoint),
            other => Err(Error::config(
                "strategy",
                format!("unknown strategy kind {other}"),
            )),
        }
    }

    /// The label vocabulary this strategy trains against.
    pub fn vocabulary(&self) -> LabelVocabulary {
        match self {
            StrategyKind::MulticlassIncident => LabelVocabulary::incident(),
            StrategyKind::MulticlassPlaces => LabelVocabulary::place(),
            StrategyKind::BinarySequential | StrategyKind::MulticlassJoint => {
                LabelVocabulary::joint()
            }
        }
    }

    pub fn is_multiclass(&self) -> bool {
        !matches!(self, StrategyKind::BinarySequential)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainStrategy {
    pub kind: StrategyKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
}

impl PretrainStrategy {
    pub fn new(kind: StrategyKind, epochs: usize, seed: u64) -> Self {
        PretrainStrategy {
            kind,
            epochs,
            batch_size: 128,
            optimizer: OptimizerSettings::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// An image reference paired with its class index.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub image: String,
    pub class_index: usize,
}

/// Per-epoch metrics of one supervised stage.
#[derive(Debug, Clone, Default)]
pub struct StageMetrics {
    pub epoch_losses: Vec<f64>,
    pub heldout_accuracy: Vec<f64>,
}

/// Core supervised loop: seeded shuffling, cross-entropy, Adam with the
/// given schedule. Mutates the checkpoint parameters in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_supervised(
    model: &mut ParameterCheckpoint,
    train: &[LabeledExample],
    heldout: &[LabeledExample],
    epochs: usize,
    batch_size: usize,
    schedule: &TrainSchedule,
    optimizer: OptimizerSettings,
    seed: u64,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
    ledger: &RunLedger,
    stage: &str,
) -> Result<StageMetrics> {
    if train.is_empty() {
        return Err(Error::Data(format!("stage {stage}: no training examples")));
    }
    schedule.validate()?;
    let start = std::time::Instant::now();
    let mut adam = AdamState::new(&model.params, optimizer);
    let steps_per_epoch = train.len().div_ceil(batch_size);
    let total_steps = steps_per_epoch * epochs;
    let mut global_step = 0usize;
    let mut metrics = StageMetrics::default();

    for epoch in 0..epochs {
        let order = epoch_order(train.len(), seed, epoch);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch_idx in batches(&order, batch_size) {
            let refs: Vec<String> = batch_idx.iter().map(|&i| train[i].image.clone()).collect();
            let labels: Vec<usize> = batch_idx.iter().map(|&i| train[i].class_index).collect();
            let batch = provider.load_batch(&refs, normalization.clone())?;
            let step =
                build_classifier_loss(model, &batch.pixels, &labels, schedule.label_smoothing)?;
            let loss_value = step.graph.value(step.loss).iter().next().copied().unwrap();
            let mut grads = step.graph.backward(step.loss)?;
            let mut grad_vec: Vec<Option<Tensor>> =
                step.params.ids.iter().map(|&id| grads.take(id)).collect();
            let lr = schedule.lr_at(global_step, total_steps);
            adam.step(&mut model.params, &mut grad_vec, lr, schedule.grad_clip);
            global_step += 1;
            epoch_loss += loss_value;
            steps += 1;
        }
        let mean_loss = epoch_loss / steps.max(1) as f64;
        metrics.epoch_losses.push(mean_loss);
        let heldout_acc = if heldout.is_empty() {
            None
        } else {
            Some(heldout_accuracy(model, heldout, provider, normalization)?)
        };
        if let Some(acc) = heldout_acc {
            metrics.heldout_accuracy.push(acc);
        }
        ledger.append(LedgerEvent::EpochMetric {
            stage: stage.to_string(),
            epoch,
            step: global_step,
            loss: mean_loss,
            accuracy: heldout_acc,
            wall_time: start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(metrics)
}

fn heldout_accuracy(
    model: &ParameterCheckpoint,
    examples: &[LabeledExample],
    provider: &dyn ImageProvider,
    normalization: &Normalization,
) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in examples.chunks(64) {
        let refs: Vec<String> = chunk.iter().map(|e| e.image.clone()).collect();
        let batch = provider.load_batch(&refs, normalization.clone())?;
        let logits = forward_logits(model, &batch)?;
        for (i, e) in chunk.iter().enumerate() {
            if argmax_row(logits.row(i)) == e.class_index {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Swap in a fresh head of the given width without recording a provenance
/// entry; the enclosing stage record covers it.
fn set_fresh_head(model: &mut ParameterCheckpoint, num_classes: usize, seed: u64) -> Result<()> {
    let old = model.clone();
    let config = model.model_config.with_classes(num_classes);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut params = crate::checkpoint::ParamSet::new();
    for s in expected_param_specs(&config) {
        if is_head_param(&s.name) {
            params.insert(
                s.name.clone(),
                crate::vit::init_tensor(&s.shape, s.init, &mut rng),
            );
        } else {
            params.insert(s.name.clone(), old.params.get(&s.name)?.clone());
        }
    }
    model.model_config = config;
    model.params = params;
    Ok(())
}

fn strip_head(model: &mut ParameterCheckpoint) -> Result<()> {
    let config = model.model_config.headless();
    let mut params = crate::checkpoint::ParamSet::new();
    for s in expected_param_specs(&config) {
        params.insert(s.name.clone(), model.params.get(&s.name)?.clone());
    }
    model.model_config = config;
    model.params = params;
    Ok(())
}

/// Held-out fraction used to monitor supervised pre-training.
const PRETRAIN_VAL_FRACTION: f64 = 0.05;

/// Multi-class pre-training over a resolved single-label example set.
/// The head width always equals the vocabulary size (43/49/92).
#[allow(clippy::too_many_arguments)]
pub fn pretrain_multiclass(
    base: ParameterCheckpoint,
    examples: &[ResolvedExample],
    vocabulary: &LabelVocabulary,
    strategy: &PretrainStrategy,
    schedule: &TrainSchedule,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
    ledger: &RunLedger,
    dataset: &str,
) -> Result<(ParameterCheckpoint, StageMetrics)> {
    strategy.validate()?;
    if !strategy.kind.is_multiclass() {
        return Err(Error::config(
            "strategy.kind",
            "pretrain_multiclass requires a multiclass strategy",
        ));
    }
    let expected_vocab = strategy.kind.vocabulary();
    if vocabulary.digest() != expected_vocab.digest() {
        return Err(Error::Integrity(format!(
            "strategy {} trains against the {} vocabulary, got {}",
            strategy.kind.as_str(),
            expected_vocab.kind.label(),
            vocabulary.kind.label()
        )));
    }
    if examples.is_empty() {
        return Err(Error::Data("no resolved examples to pre-train on".into()));
    }
    if examples
        .iter()
        .any(|e| e.vocabulary_digest != vocabulary.digest())
    {
        return Err(Error::Integrity(
            "examples were resolved against a different vocabulary version".into(),
        ));
    }
    base.validate()?;

    let mut model = base;
    set_fresh_head(&mut model, vocabulary.len(), strategy.seed)?;
    debug_assert_eq!(model.model_config.num_classes, vocabulary.len());

    let (train, heldout) = train_val_split(
        examples,
        |e| e.entry_id.as_str(),
        PRETRAIN_VAL_FRACTION,
        strategy.seed,
    );
    let to_labeled = |xs: &[&ResolvedExample]| -> Vec<LabeledExample> {
        xs.iter()
            .map(|e| LabeledExample {
                image: e.entry_id.clone(),
                class_index: e.class_index,
            })
            .collect()
    };
    let train = to_labeled(&train);
    let heldout = to_labeled(&heldout);

    let stage = format!("{}:{}", strategy.kind.as_str(), dataset);
    ledger.append(LedgerEvent::StageStart {
        stage: stage.clone(),
        fingerprint: String::new(),
    })?;
    let metrics = train_supervised(
        &mut model,
        &train,
        &heldout,
        strategy.epochs,
        strategy.batch_size,
        schedule,
        strategy.optimizer.clone(),
        strategy.seed,
        provider,
        normalization,
        ledger,
        &stage,
    )?;
    model.push_provenance(
        ProvenanceRecord::stage(
            dataset,
            strategy.kind.as_str(),
            strategy.epochs,
            strategy.seed,
        )
        .with_vocabulary(vocabulary.digest())
        .with_normalization(normalization.clone()),
    );
    ledger.append(LedgerEvent::StageFinish {
        stage,
        fingerprint: String::new(),
        checkpoint_digest: model.digest()?,
        wall_time: 0.0,
    })?;
    Ok((model, metrics))
}

/// Per-stage summary from sequential binary pre-training.
#[derive(Debug, Clone)]
pub struct BinaryStageInfo {
    pub class_name: String,
    pub skipped: bool,
    pub trained_examples: usize,
    /// Digest of the encoder parameters after this stage.
    pub encoder_digest: String,
}

fn encoder_digest(model: &ParameterCheckpoint) -> String {
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    for (name, value) in model.params.iter() {
        if is_head_param(name) {
            continue;
        }
        hasher.update(name.as_bytes());
        for &v in value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Sequential one-vs-rest pre-training: iterate the vocabulary's classes in
/// order, swapping in a fresh 2-way head per class while the encoder
/// carries over. Earlier lessons can be overwritten by later classes, which
/// is why this is the baseline strategy. The result is a headless encoder.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_binary_sequential(
    base: ParameterCheckpoint,
    vocabulary: &LabelVocabulary,
    tasks: &[(BinaryTask, Vec<LabeledExample>)],
    strategy: &PretrainStrategy,
    schedule: &TrainSchedule,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
    ledger: &RunLedger,
    dataset: &str,
) -> Result<(ParameterCheckpoint, Vec<BinaryStageInfo>)> {
    strategy.validate()?;
    if strategy.kind != StrategyKind::BinarySequential {
        return Err(Error::config("strategy.kind", "expected binary_sequential"));
    }
    base.validate()?;
    // tasks must follow vocabulary order
    let mut order_check: Vec<usize> = Vec::with_capacity(tasks.len());
    for (task, _) in tasks {
        match vocabulary.index_of(&task.class_name) {
            Some(i) => order_check.push(i),
            None => {
                return Err(Error::Vocabulary(format!(
                    "binary task class {} is not in the vocabulary",
                    task.class_name
                )))
            }
        }
    }
    if order_check.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "tasks",
            "binary tasks must follow vocabulary order",
        ));
    }

    let mut model = base;
    let mut stages = Vec::with_capacity(tasks.len());
    for (i, (task, examples)) in tasks.iter().enumerate() {
        let stage = format!("binary_sequential:{}:{}", dataset, task.class_name);
        if task.is_empty() || examples.is_empty() {
            ledger.append(LedgerEvent::StageSkipped {
                stage,
                reason: format!("class {} has no positive examples", task.class_name),
            })?;
            stages.push(BinaryStageInfo {
                class_name: task.class_name.clone(),
                skipped: true,
                trained_examples: 0,
                encoder_digest: encoder_digest(&model),
            });
            continue;
        }
        let class_seed = strategy.seed.wrapping_add(i as u64);
        set_fresh_head(&mut model, 2, class_seed)?;
        ledger.append(LedgerEvent::StageStart {
            stage: stage.clone(),
            fingerprint: String::new(),
        })?;
        train_supervised(
            &mut model,
            examples,
            &[],
            strategy.epochs,
            strategy.batch_size,
            schedule,
            strategy.optimizer.clone(),
            class_seed,
            provider,
            normalization,
            ledger,
            &stage,
        )?;
        stages.push(BinaryStageInfo {
            class_name: task.class_name.clone(),
            skipped: false,
            trained_examples: examples.len(),
            encoder_digest: encoder_digest(&model),
        });
    }
    strip_head(&mut model)?;
    let sequence: Vec<&str> = stages.iter().map(|s| s.class_name.as_str()).collect();
    model.push_provenance(
        ProvenanceRecord::stage(
            dataset,
            StrategyKind::BinarySequential.as_str(),
            strategy.epochs,
            strategy.seed,
        )
        .with_vocabulary(vocabulary.digest())
        .with_normalization(normalization.clone())
        .with_detail(format!("class_sequence={}", sequence.join(","))),
    );
    Ok((model, stages))
}

/// Builds the ordered per-class task list for sequential binary training.
pub fn build_binary_tasks(
    entries: &[crate::data::manifest::DatasetManifestEntry],
    vocabulary: &LabelVocabulary,
    negative_ratio: f64,
    seed: u64,
) -> Result<Vec<(BinaryTask, Vec<LabeledExample>)>> {
    let incident = LabelVocabulary::incident();
    let place = LabelVocabulary::place();
    let mut tasks = Vec::with_capacity(vocabulary.len());
    for (i, class) in vocabulary.classes().iter().enumerate() {
        let task = crate::data::resolve::make_binary_task(
            entries,
            class,
            &incident,
            &place,
            negative_ratio,
            seed.wrapping_add(i as u64),
        )?;
        let mut examples = Vec::with_capacity(task.positives.len() + task.negatives.len());
        for id in &task.negatives {
            examples.push(LabeledExample {
                image: id.clone(),
                class_index: 0,
            });
        }
        for id in &task.positives {
            examples.push(LabeledExample {
                image: id.clone(),
                class_index: 1,
            });
        }
        tasks.push((task, examples));
    }
    Ok(tasks)
}

/// Where a stage composition starts from.
pub enum BaseSource {
    Fresh {
        config: crate::vit::ModelConfig,
        seed: u64,
    },
    External {
        path: std::path::PathBuf,
    },
    /// An in-memory checkpoint, e.g. the output of an earlier stage.
    Checkpoint(ParameterCheckpoint),
}

/// One stage in a composed pre-training pipeline.
#[derive(Debug, Clone)]
pub enum StageSpec {
    Ssl(SslTrainConfig),
    Supervised {
        strategy: PretrainStrategy,
        schedule: TrainSchedule,
    },
}

/// Everything stages need from the data layer.
pub struct PretrainContext<'a> {
    pub entries: &'a [crate::data::manifest::DatasetManifestEntry],
    pub provider: &'a dyn ImageProvider,
    pub normalization: Normalization,
    pub ledger: &'a RunLedger,
    pub dataset: String,
    /// Negative sampling ratio for binary tasks.
    pub binary_negative_ratio: f64,
    /// Restrict the self-supervised split to positively labeled entries.
    pub ssl_positive_only: bool,
    /// When set, a base checkpoint whose architecture differs from this
    /// config is rejected before any stage runs.
    pub expected_config: Option<crate::vit::ModelConfig>,
}

impl<'a> PretrainContext<'a> {
    fn ssl_split(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| !self.ssl_positive_only || e.has_positive_label())
            .map(|e| e.entry_id.clone())
            .collect()
    }
}

/// Run stages in order, threading the checkpoint through. Provenance is
/// the concatenation of the per-stage records, appended to whatever the
/// base checkpoint already carried.
pub fn compose_stages(
    base: BaseSource,
    stages: &[StageSpec],
    ctx: &PretrainContext,
) -> Result<ParameterCheckpoint> {
    if stages.is_empty() {
        return Err(Error::config("stages", "stage list must not be empty"));
    }
    let mut model = match base {
        BaseSource::Fresh { ref config, seed } => {
            crate::vit::build_model(&config.headless(), seed)?
        }
        BaseSource::External { ref path } => ParameterCheckpoint::load(path)?,
        BaseSource::Checkpoint(ckpt) => ckpt,
    };
    if let Some(expected) = &ctx.expected_config {
        if model.model_config.headless() != expected.headless() {
            return Err(Error::config(
                "base",
                format!(
                    "base checkpoint architecture {:?} does not match the configured model {:?}",
                    model.model_config.headless(),
                    expected.headless()
                ),
            ));
        }
    }
    for (i, stage) in stages.iter().enumerate() {
        match stage {
            StageSpec::Ssl(ssl) => {
                let split = ctx.ssl_split();
                let mut encoder = model;
                strip_head(&mut encoder)?;
                let (next, _) = pretrain_ssl_from(
                    encoder,
                    &split,
                    ssl,
                    ctx.provider,
                    &ctx.normalization,
                    ctx.ledger,
                    &ctx.dataset,
                )?;
                model = next;
            }
            StageSpec::Supervised { strategy, schedule } => {
                if strategy.kind.is_multiclass() {
                    let vocabulary = strategy.kind.vocabulary();
                    let examples =
                        crate::data::resolve::resolve_single_label(ctx.entries, &vocabulary)?;
                    if examples.is_empty() {
                        return Err(Error::Data(format!(
                            "stage {i}: no entries resolve into the {} vocabulary",
                            vocabulary.kind.label()
                        )));
                    }
                    let (next, _) = pretrain_multiclass(
                        model,
                        &examples,
                        &vocabulary,
                        strategy,
                        schedule,
                        ctx.provider,
                        &ctx.normalization,
                        ctx.ledger,
                        &ctx.dataset,
                    )?;
                    model = next;
                } else {
                    let vocabulary = LabelVocabulary::joint();
                    let tasks = build_binary_tasks(
                        ctx.entries,
                        &vocabulary,
                        ctx.binary_negative_ratio,
                        strategy.seed,
                    )?;
                    let (next, _) = pretrain_binary_sequential(
                        model,
                        &vocabulary,
                        &tasks,
                        strategy,
                        schedule,
                        ctx.provider,
                        &ctx.normalization,
                        ctx.ledger,
                        &ctx.dataset,
                    )?;
                    model = next;
                }
            }
        }
    }
    Ok(model)
}

//! Declarative experiment files and their execution: stage composition
//! with content-addressed caching, per-run persistence, crash-safe
//! resumption, and scorecard emission.
//!
//! Every artifact lives under `output_dir/<id>-<fingerprint>/`, where the
//! fingerprint is a digest of the canonicalized experiment file plus the
//! code version; rerunning an unchanged experiment is a no-op.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crisisvit::benchmark::{
    evaluate, finetune, load_benchmark, FinetuneSchedule, Split, TaskId, TaskSpec,
};
use crisisvit::checkpoint::ParameterCheckpoint;
use crisisvit::data::manifest::{load_manifest, RetrievalStatus};
use crisisvit::error::{Error, Result};
use crisisvit::images::{DirImageProvider, ImageStoreDir, Normalization, StoreImageProvider};
use crisisvit::ledger::{LedgerEvent, RunLedger};
use crisisvit::mae::SslTrainConfig;
use crisisvit::pretrain::{
    compose_stages, BaseSource, PretrainContext, PretrainStrategy, StageSpec, StrategyKind,
};
use crisisvit::stats::{scorecard_from_runs, ScorecardMeta, SystemScorecard};
use crisisvit::trainer::{DecayShape, OptimizerSettings, TrainSchedule};
use crisisvit::vit::{Activation, ModelConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_activation")]
    pub activation: String,
}

fn default_channels() -> usize {
    3
}
fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_activation() -> String {
    "relu".into()
}

impl ModelSection {
    pub fn to_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let activation = match self.activation.as_str() {
            "relu" => Activation::Relu,
            "gelu" => Activation::Gelu,
            other => {
                return Err(Error::config(
                    "model.activation",
                    format!("unknown activation {other}"),
                ))
            }
        };
        Ok(ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            depth: self.depth,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            activation,
            num_classes,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationSection {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for NormalizationSection {
    fn default() -> Self {
        NormalizationSection {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseSection {
    pub source: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Default for BaseSection {
    fn default() -> Self {
        BaseSection {
            source: "fresh".into(),
            seed: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub manifest: String,
    pub image_store: String,
    #[serde(default = "default_negative_ratio")]
    pub binary_negative_ratio: f64,
    #[serde(default)]
    pub ssl_positive_only: bool,
}

fn default_negative_ratio() -> f64 {
    1.0
}

/// One pre-training stage; `kind` selects among `ssl`, `binary_sequential`,
/// `multiclass_incident`, `multiclass_places`, `multiclass_joint`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSection {
    pub kind: String,
    #[serde(default = "default_stage_epochs")]
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_smoothing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    // self-supervised stage knobs
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_dim: Option<usize>,
}

fn default_stage_epochs() -> usize {
    1
}

pub const STAGE_KINDS: [&str; 5] = [
    "ssl",
    "binary_sequential",
    "multiclass_incident",
    "multiclass_places",
    "multiclass_joint",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub benchmark_root: String,
    pub tasks: Vec<String>,
    #[serde(default = "default_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_ft_lr")]
    pub learning_rate: f64,
}

fn default_ft_epochs() -> usize {
    10
}
fn default_ft_batch() -> usize {
    128
}
fn default_ft_lr() -> f64 {
    5e-5
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportSection {
    #[serde(default)]
    pub family: String,
    #[serde(default)]
    pub self_supervised: String,
    #[serde(default)]
    pub supervised: String,
    #[serde(default)]
    pub methodology: String,
    #[serde(default)]
    pub epochs: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentFile {
    pub id: String,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub allow_fewer_runs: bool,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub model: ModelSection,
    #[serde(default)]
    pub normalization: NormalizationSection,
    #[serde(default)]
    pub base: BaseSection,
    pub data: DataSection,
    #[serde(default)]
    pub stages: Vec<StageSection>,
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_n_runs() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<ExperimentFile> {
        toml::from_str(text).map_err(|e| Error::config("experiment", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ExperimentFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("experiment file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Check every invariant; violations carry field paths.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |path: &str, message: String| {
            out.push(Violation {
                path: path.into(),
                message,
            })
        };

        if self.id.trim().is_empty() {
            push("id", "experiment id must not be empty".into());
        }
        if self.n_runs < 1 {
            push("n_runs", "must be at least 1".into());
        } else if self.n_runs < 3 && !self.allow_fewer_runs {
            push(
                "n_runs",
                format!(
                    "protocol requires at least 3 runs, got {} (set allow_fewer_runs to override)",
                    self.n_runs
                ),
            );
        }
        if self.seeds.len() < self.n_runs {
            push(
                "seeds",
                format!(
                    "need at least n_runs = {} seeds, got {}",
                    self.n_runs,
                    self.seeds.len()
                ),
            );
        }
        match self.model.to_config(0) {
            Ok(config) => {
                if let Err(Error::Config { field, message }) = config.validate() {
                    out.push(Violation {
                        path: format!("model.{field}"),
                        message,
                    });
                }
            }
            Err(Error::Config { field, message }) => out.push(Violation {
                path: field,
                message,
            }),
            Err(e) => out.push(Violation {
                path: "model".into(),
                message: e.to_string(),
            }),
        }
        if self.normalization.mean.len() != self.model.channels
            || self.normalization.std.len() != self.model.channels
        {
            out.push(Violation {
                path: "normalization".into(),
                message: format!("mean/std must have {} entries", self.model.channels),
            });
        }
        match self.base.source.as_str() {
            "fresh" => {}
            "external" => {
                if self.base.path.is_none() {
                    out.push(Violation {
                        path: "base.path".into(),
                        message: "external base requires a checkpoint path".into(),
                    });
                }
            }
            other => out.push(Violation {
                path: "base.source".into(),
                message: format!("unknown base source {other} (expected fresh or external)"),
            }),
        }
        if self.stages.is_empty() {
            out.push(Violation {
                path: "stages".into(),
                message: "at least one pre-training stage is required".into(),
            });
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if !STAGE_KINDS.contains(&stage.kind.as_str()) {
                out.push(Violation {
                    path: format!("stages[{i}].kind"),
                    message: format!(
                        "unknown stage kind {} (expected one of {:?})",
                        stage.kind, STAGE_KINDS
                    ),
                });
            }
            if stage.epochs < 1 {
                out.push(Violation {
                    path: format!("stages[{i}].epochs"),
                    message: "must be at least 1".into(),
                });
            }
            if let Some(r) = stage.mask_ratio {
                if !(r > 0.0 && r < 1.0) {
                    out.push(Violation {
                        path: format!("stages[{i}].mask_ratio"),
                        message: format!("must be in (0, 1), got {r}"),
                    });
                }
            }
        }
        if self.finetune.tasks.is_empty() {
            out.push(Violation {
                path: "finetune.tasks".into(),
                message: "at least one task is required".into(),
            });
        }
        for (i, task) in self.finetune.tasks.iter().enumerate() {
            if TaskId::parse(task).is_err() {
                out.push(Violation {
                    path: format!("finetune.tasks[{i}]"),
                    message: format!("unknown task {task}"),
                });
            }
        }
        if self.finetune.epochs < 1 {
            out.push(Violation {
                path: "finetune.epochs".into(),
                message: "must be at least 1".into(),
            });
        }
        out
    }

    /// Canonical JSON rendering (sorted keys) used for fingerprinting.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)?)
    }

    /// Digest of the canonicalized file plus the code version tag; keys
    /// every artifact this experiment produces.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json()?.as_bytes());
        hasher.update(b"\x00");
        hasher.update(CODE_VERSION.as_bytes());
        Ok(hex::encode(hasher.finalize()))
    }

    fn ssl_config(&self, stage: &StageSection) -> SslTrainConfig {
        let defaults = SslTrainConfig::default();
        SslTrainConfig {
            mask_ratio: stage.mask_ratio.unwrap_or(defaults.mask_ratio),
            epochs: stage.epochs,
            batch_size: stage.batch_size.unwrap_or(1024),
            learning_rate: stage.learning_rate.unwrap_or(defaults.learning_rate),
            weight_decay: stage.weight_decay.unwrap_or(defaults.weight_decay),
            seed: stage.seed.unwrap_or(self.base.seed),
            decoder_depth: stage.decoder_depth.unwrap_or(defaults.decoder_depth),
            decoder_dim: stage.decoder_dim.unwrap_or(defaults.decoder_dim),
            warmup_fraction: stage.warmup_fraction.unwrap_or(defaults.warmup_fraction),
            ..defaults
        }
    }

    fn stage_spec(&self, stage: &StageSection) -> Result<StageSpec> {
        if stage.kind == "ssl" {
            return Ok(StageSpec::Ssl(self.ssl_config(stage)));
        }
        let kind = StrategyKind::parse(&stage.kind)?;
        let strategy = PretrainStrategy {
            kind,
            epochs: stage.epochs,
            batch_size: stage.batch_size.unwrap_or(128),
            optimizer: OptimizerSettings {
                weight_decay: stage.weight_decay.unwrap_or(0.0),
                ..OptimizerSettings::default()
            },
            seed: stage.seed.unwrap_or(self.base.seed),
        };
        let defaults = TrainSchedule::default();
        let schedule = TrainSchedule {
            learning_rate: stage.learning_rate.unwrap_or(defaults.learning_rate),
            warmup_fraction: stage.warmup_fraction.unwrap_or(defaults.warmup_fraction),
            decay: DecayShape::Cosine,
            grad_clip: stage.grad_clip.unwrap_or(defaults.grad_clip),
            label_smoothing: stage.label_smoothing.unwrap_or(defaults.label_smoothing),
        };
        Ok(StageSpec::Supervised { strategy, schedule })
    }

    fn finetune_schedule(&self) -> FinetuneSchedule {
        FinetuneSchedule {
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            schedule: TrainSchedule::with_learning_rate(self.finetune.learning_rate),
            optimizer: OptimizerSettings::default(),
        }
    }

    fn scorecard_meta(&self) -> ScorecardMeta {
        ScorecardMeta {
            family: if self.report.family.is_empty() {
                "1-experiments".into()
            } else {
                self.report.family.clone()
            },
            self_supervised: self.report.self_supervised.clone(),
            supervised: self.report.supervised.clone(),
            methodology: self.report.methodology.clone(),
            epochs: self.report.epochs.clone(),
            reference: false,
            training_hours: None,
        }
    }
}

fn resolve_path(base_dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub scorecard: SystemScorecard,
    pub out_dir: PathBuf,
    pub fingerprint: String,
    /// True when every stage and every run was served from cache.
    pub fully_resumed: bool,
}

fn stage_fingerprint(prev: &str, stage: &StageSection, file: &ExperimentFile) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(prev.as_bytes());
    hasher.update(serde_json::to_string(&serde_json::to_value(stage)?)?.as_bytes());
    hasher.update(serde_json::to_string(&serde_json::to_value(&file.model)?)?.as_bytes());
    hasher.update(serde_json::to_string(&serde_json::to_value(&file.normalization)?)?.as_bytes());
    hasher.update(serde_json::to_string(&serde_json::to_value(&file.base)?)?.as_bytes());
    Ok(hex::encode(hasher.finalize()))
}

/// Execute (or resume) one experiment. `base_dir` anchors the relative
/// paths inside the file; artifacts land under
/// `<output_dir>/<id>-<fingerprint[..12]>/`.
pub fn run_experiment(
    file: &ExperimentFile,
    base_dir: &Path,
    output_override: Option<&Path>,
) -> Result<RunOutcome> {
    let violations = file.validate();
    if !violations.is_empty() {
        let joined = violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::config("experiment", joined));
    }
    let fingerprint = file.fingerprint()?;
    let out_root = match output_override {
        Some(p) => p.to_path_buf(),
        None => resolve_path(base_dir, file.output_dir.as_deref().unwrap_or("runs")),
    };
    let out_dir = out_root.join(format!("{}-{}", file.id, &fingerprint[..12]));
    std::fs::create_dir_all(&out_dir)?;
    let ledger = RunLedger::open(out_dir.join("ledger.jsonl"))?;
    let canonical_path = out_dir.join("experiment.json");
    if !canonical_path.exists() {
        std::fs::write(&canonical_path, file.canonical_json()?)?;
    }

    let outcome = run_experiment_inner(file, base_dir, &out_dir, &fingerprint, &ledger);
    if let Err(e) = &outcome {
        let _ = ledger.append(LedgerEvent::Failure {
            stage: "experiment".into(),
            message: e.to_string(),
        });
    }
    outcome
}

fn run_experiment_inner(
    file: &ExperimentFile,
    base_dir: &Path,
    out_dir: &Path,
    fingerprint: &str,
    ledger: &RunLedger,
) -> Result<RunOutcome> {
    let model_config = file.model.to_config(0)?;
    let normalization = Normalization {
        mean: file.normalization.mean.clone(),
        std: file.normalization.std.clone(),
    };

    // data context: only retrieved entries can be trained on
    let manifest_path = resolve_path(base_dir, &file.data.manifest);
    let load = load_manifest(&manifest_path)?;
    let fetched: Vec<_> = load
        .entries
        .iter()
        .filter(|e| e.retrieval_status == RetrievalStatus::Fetched)
        .cloned()
        .collect();
    if fetched.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} has no retrieved entries to train on",
            manifest_path.display()
        )));
    }
    ledger.append(LedgerEvent::Note {
        message: format!(
            "manifest: {} entries, {} retrieved, {} rejected; deterministic_mode={}",
            load.summary.total,
            fetched.len(),
            load.summary.rejected,
            crisisvit::deterministic_mode()
        ),
    })?;
    let store = ImageStoreDir::open(resolve_path(base_dir, &file.data.image_store))?;
    let index: std::collections::HashMap<String, String> = fetched
        .iter()
        .filter_map(|e| e.content_digest.clone().map(|d| (e.entry_id.clone(), d)))
        .collect();
    let provider = StoreImageProvider::new(store, model_config.image_size, normalization.clone())
        .with_index(index);

    let ctx = PretrainContext {
        entries: &fetched,
        provider: &provider,
        normalization: normalization.clone(),
        ledger,
        dataset: "incidents-manifest".into(),
        binary_negative_ratio: file.data.binary_negative_ratio,
        ssl_positive_only: file.data.ssl_positive_only,
        expected_config: Some(model_config.clone()),
    };

    // stage composition with content-addressed caching
    let mut fully_resumed = true;
    let mut stage_fp = fingerprint.to_string();
    let mut model: Option<ParameterCheckpoint> = None;
    for (i, stage) in file.stages.iter().enumerate() {
        stage_fp = stage_fingerprint(&stage_fp, stage, file)?;
        let stage_path = out_dir
            .join("stages")
            .join(format!("stage{i}-{}.cvck", &stage_fp[..12]));
        let stage_label = format!("stage{i}:{}", stage.kind);
        if stage_path.exists() {
            model = Some(ParameterCheckpoint::load(&stage_path)?);
            ledger.append(LedgerEvent::StageSkipped {
                stage: stage_label,
                reason: format!("cached at {}", stage_path.display()),
            })?;
            continue;
        }
        fully_resumed = false;
        let base = match model.take() {
            Some(ckpt) => BaseSource::Checkpoint(ckpt),
            None => match file.base.source.as_str() {
                "external" => BaseSource::External {
                    path: resolve_path(base_dir, file.base.path.as_deref().unwrap()),
                },
                _ => BaseSource::Fresh {
                    config: model_config.clone(),
                    seed: file.base.seed,
                },
            },
        };
        ledger.append(LedgerEvent::StageStart {
            stage: stage_label.clone(),
            fingerprint: stage_fp.clone(),
        })?;
        let started = std::time::Instant::now();
        let spec = file.stage_spec(stage)?;
        let next = compose_stages(base, &[spec], &ctx).map_err(|e| match e {
            Error::Config { .. } | Error::Data(_) | Error::Integrity(_) | Error::Vocabulary(_) => e,
            other => Error::Training(format!("stage {i} ({}): {other}", stage.kind)),
        })?;
        next.save(&stage_path)?;
        ledger.append(LedgerEvent::StageFinish {
            stage: stage_label,
            fingerprint: stage_fp.clone(),
            checkpoint_digest: next.digest()?,
            wall_time: started.elapsed().as_secs_f64(),
        })?;
        model = Some(next);
    }
    let pretrained = model.expect("at least one stage");

    // fine-tune and evaluate each task across the seeded runs
    let benchmark_root = resolve_path(base_dir, &file.finetune.benchmark_root);
    let (tasks, integrity) = load_benchmark(&benchmark_root)?;
    if !integrity.violations.is_empty() {
        return Err(Error::Data(format!(
            "benchmark integrity violations: {}",
            integrity.violations.join("; ")
        )));
    }
    let bench_provider = DirImageProvider::new(
        &benchmark_root,
        model_config.image_size,
        normalization.clone(),
    );
    let ft_schedule = file.finetune_schedule();

    let mut all_runs = Vec::new();
    for task_name in &file.finetune.tasks {
        let task_id = TaskId::parse(task_name)?;
        let task: &TaskSpec = tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::Data(format!("benchmark does not provide task {task_name}")))?;
        for &seed in file.seeds.iter().take(file.n_runs) {
            let run_path = out_dir
                .join("runs")
                .join(task_name)
                .join(format!("seed{seed}.json"));
            if run_path.exists() {
                all_runs.push(crisisvit::benchmark::RunResult::load(&run_path)?);
                ledger.append(LedgerEvent::StageSkipped {
                    stage: format!("run:{task_name}:seed{seed}"),
                    reason: "cached".into(),
                })?;
                continue;
            }
            fully_resumed = false;
            let (finetuned, _) = finetune(
                &pretrained,
                task,
                &ft_schedule,
                seed,
                &bench_provider,
                &normalization,
                ledger,
            )
            .map_err(|e| match e {
                Error::Config { .. } | Error::Data(_) => e,
                other => Error::Training(format!("fine-tune {task_name} seed {seed}: {other}")),
            })?;
            let mut run = evaluate(
                &finetuned,
                task,
                Split::Test,
                &bench_provider,
                &normalization,
            )?;
            run.seed = seed;
            run.provenance_digest = format!(
                "{}/{}",
                pretrained.provenance_digest(),
                finetuned.provenance_digest()
            );
            run.save(&run_path)?;
            ledger.append(LedgerEvent::RunRecorded {
                task: task_name.clone(),
                seed,
                accuracy: run.accuracy,
            })?;
            all_runs.push(run);
        }
    }

    let card = scorecard_from_runs(file.id.clone(), file.scorecard_meta(), &all_runs)?;
    card.save(&out_dir.join("scorecard.json"))?;
    Ok(RunOutcome {
        scorecard: card,
        out_dir: out_dir.to_path_buf(),
        fingerprint: fingerprint.to_string(),
        fully_resumed,
    })
}

/// Collect scorecards under a directory tree (files named scorecard.json).
pub fn collect_scorecards(dir: &Path) -> Result<Vec<SystemScorecard>> {
    let mut cards = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("scan {}: {e}", dir.display())))?;
        if entry.file_type().is_file() && entry.file_name() == "scorecard.json" {
            cards.push(SystemScorecard::load(entry.path())?);
        }
    }
    Ok(cards)
}

/// Deduplicate by system name, keeping the first occurrence.
pub fn dedup_scorecards(cards: Vec<SystemScorecard>) -> Vec<SystemScorecard> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for c in cards {
        if seen.insert(c.system.clone()) {
            out.push(c);
        }
    }
    out
}

/// Significance of every run-backed system against the baseline; systems
/// whose run counts cannot pair with the baseline are left out.
pub fn matrix_significance(
    cards: &[SystemScorecard],
    baseline: &str,
    alpha: f64,
) -> Result<Option<crisisvit::stats::SignificanceReport>> {
    let base = cards
        .iter()
        .find(|c| c.system == baseline)
        .ok_or_else(|| Error::config("baseline", format!("baseline {baseline} not found")))?;
    if base.meta.reference {
        return Ok(None);
    }
    let run_counts = |c: &SystemScorecard| -> BTreeMap<TaskId, usize> {
        c.tasks.iter().map(|(k, v)| (*k, v.runs.len())).collect()
    };
    let base_counts = run_counts(base);
    let comparable: Vec<SystemScorecard> = cards
        .iter()
        .filter(|c| c.system == baseline || (!c.meta.reference && run_counts(c) == base_counts))
        .cloned()
        .collect();
    if comparable.len() < 2 {
        return Ok(None);
    }
    Ok(Some(crisisvit::stats::significance_vs_baseline(
        &comparable,
        baseline,
        alpha,
    )?))
}

//! End-to-end orchestration tests: experiment runs with caching and
//! resumption, matrix reports with reference rows, and binary exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

use crisisvit::data::manifest::{save_manifest, DatasetManifestEntry, RetrievalStatus};
use crisisvit::data::vocab::LabelVocabulary;
use crisisvit::fixtures;
use crisisvit::images::ImageStoreDir;
use crisisvit::ledger::{LedgerEvent, RunLedger};
use crisisvit_cli::experiment::{run_experiment, ExperimentFile};

/// Build a complete on-disk toy environment: a fetched manifest over the
/// place vocabulary, its image store, and a benchmark tree.
fn build_env(root: &Path, corpus_n: usize, per_split: usize) {
    let vocab = LabelVocabulary::place();
    let store = ImageStoreDir::open(root.join("store")).unwrap();
    let mut entries = Vec::new();
    for i in 0..corpus_n {
        let class_index = i % vocab.len();
        let class = vocab.classes()[class_index].clone();
        let bytes = fixtures::class_image_png_bytes(class_index, vocab.len(), 16, i as u64);
        let digest = store.put(&bytes).unwrap();
        let mut e =
            DatasetManifestEntry::pending(format!("e{i:04}"), format!("http://fixture/{i}"));
        e.place_labels = vec![class];
        e.retrieval_status = RetrievalStatus::Fetched;
        e.content_digest = Some(digest);
        entries.push(e);
    }
    save_manifest(&root.join("manifest.jsonl"), &entries).unwrap();
    fixtures::write_benchmark_dir(&root.join("benchmark"), per_split, 16, 7).unwrap();
}

fn experiment_toml(id: &str) -> String {
    format!(
        r#"
id = "{id}"
n_runs = 3
seeds = [1, 2, 3]

[model]
image_size = 16
patch_size = 8
depth = 1
hidden_dim = 16
num_heads = 2

[base]
source = "fresh"
seed = 5

[data]
manifest = "manifest.jsonl"
image_store = "store"

[[stages]]
kind = "multiclass_places"
epochs = 1
batch_size = 32
learning_rate = 1e-3
seed = 3

[finetune]
benchmark_root = "benchmark"
tasks = ["disaster_types", "informativeness", "humanitarian", "damage_severity"]
epochs = 1
batch_size = 16
learning_rate = 5e-4

[report]
family = "1-experiments"
self_supervised = "None"
supervised = "Incidents-manifest"
methodology = "Multi-Class (Places)"
epochs = "1"
"#
    )
}

fn write_experiment(root: &Path, id: &str) -> PathBuf {
    let path = root.join(format!("{id}.toml"));
    std::fs::write(&path, experiment_toml(id)).unwrap();
    path
}

#[test]
fn run_produces_scorecard_and_rerun_is_noop() {
    let dir = tempfile::tempdir().unwrap();
    build_env(dir.path(), 98, 8);
    let path = write_experiment(dir.path(), "toyA");
    let file = ExperimentFile::load(&path).unwrap();

    let first = run_experiment(&file, dir.path(), None).unwrap();
    assert!(!first.fully_resumed);
    assert_eq!(first.scorecard.tasks.len(), 4);
    assert!(first.out_dir.join("scorecard.json").exists());
    assert!(first.out_dir.join("ledger.jsonl").exists());

    let second = run_experiment(&file, dir.path(), None).unwrap();
    assert!(
        second.fully_resumed,
        "unchanged rerun must be a no-op resume"
    );
    assert_eq!(second.out_dir, first.out_dir);
    for task in first.scorecard.tasks.keys() {
        assert!(
            (first.scorecard.tasks[task].mean - second.scorecard.tasks[task].mean).abs() < 1e-9
        );
    }
}

#[test]
fn equal_fingerprints_give_equal_scorecards() {
    let dir = tempfile::tempdir().unwrap();
    build_env(dir.path(), 98, 8);
    let path = write_experiment(dir.path(), "toyB");
    let file = ExperimentFile::load(&path).unwrap();

    let a = run_experiment(&file, dir.path(), Some(&dir.path().join("outA"))).unwrap();
    let b = run_experiment(&file, dir.path(), Some(&dir.path().join("outB"))).unwrap();
    assert_ne!(a.out_dir, b.out_dir);
    assert_eq!(a.fingerprint, b.fingerprint);
    assert!((a.scorecard.avg - b.scorecard.avg).abs() < 1e-6);
    for task in a.scorecard.tasks.keys() {
        let ra = &a.scorecard.tasks[task].runs;
        let rb = &b.scorecard.tasks[task].runs;
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn failed_run_resumes_without_reexecuting_stages() {
    let dir = tempfile::tempdir().unwrap();
    // no benchmark yet: the run fails after pre-training
    let vocab_n = 98;
    build_env(dir.path(), vocab_n, 8);
    std::fs::remove_dir_all(dir.path().join("benchmark")).unwrap();
    let path = write_experiment(dir.path(), "toyC");
    let file = ExperimentFile::load(&path).unwrap();

    let err = run_experiment(&file, dir.path(), None).unwrap_err();
    assert!(
        matches!(err, crisisvit::Error::Data(_)),
        "expected data error, got {err:?}"
    );

    // the pre-training stage checkpoint must exist already
    let out_dir = {
        let fingerprint = file.fingerprint().unwrap();
        dir.path()
            .join("runs")
            .join(format!("{}-{}", file.id, &fingerprint[..12]))
    };
    let stage_files: Vec<_> = std::fs::read_dir(out_dir.join("stages"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(stage_files.len(), 1);
    let ledger_records = RunLedger::read_all(&out_dir.join("ledger.jsonl")).unwrap();
    assert!(ledger_records
        .iter()
        .any(|r| matches!(&r.event, LedgerEvent::Failure { .. })));

    // provide the benchmark and resume: the stage is served from cache
    fixtures::write_benchmark_dir(&dir.path().join("benchmark"), 8, 16, 7).unwrap();
    let outcome = run_experiment(&file, dir.path(), None).unwrap();
    assert!(!outcome.fully_resumed);
    let records = RunLedger::read_all(&out_dir.join("ledger.jsonl")).unwrap();
    let skips = records
        .iter()
        .filter(|r| matches!(&r.event, LedgerEvent::StageSkipped { stage, reason } if stage.starts_with("stage0") && reason.contains("cached")))
        .count();
    assert_eq!(skips, 1, "stage must resume from cache");
    let finishes = records
        .iter()
        .filter(|r| matches!(&r.event, LedgerEvent::StageFinish { stage, .. } if stage.starts_with("stage0")))
        .count();
    assert_eq!(
        finishes, 1,
        "stage must have been trained exactly once across both runs"
    );
}

#[test]
fn matrix_combines_experiments_with_reference_rows() {
    let dir = tempfile::tempdir().unwrap();
    build_env(dir.path(), 98, 8);
    let a = write_experiment(dir.path(), "toyD");
    let b_toml = experiment_toml("toyE").replace("seed = 3", "seed = 4");
    let b = dir.path().join("toyE.toml");
    std::fs::write(&b, b_toml).unwrap();

    let file_a = ExperimentFile::load(&a).unwrap();
    let file_b = ExperimentFile::load(&b).unwrap();
    run_experiment(&file_a, dir.path(), Some(&dir.path().join("out"))).unwrap();
    run_experiment(&file_b, dir.path(), Some(&dir.path().join("out"))).unwrap();

    let mut cards = crisisvit_cli::collect_scorecards(&dir.path().join("out")).unwrap();
    assert_eq!(cards.len(), 2);
    cards.extend(crisisvit_cli::reference::builtin_reference().unwrap());
    let cards = crisisvit_cli::dedup_scorecards(cards);
    let significance = crisisvit_cli::matrix_significance(&cards, "toyD", 0.01).unwrap();
    let report = crisisvit::stats::emit_table(&cards, significance.as_ref(), "toyD").unwrap();
    assert!(report.text.contains("[paper-reported]"));
    let resnet = report
        .rows
        .iter()
        .find(|r| r.system == "ResNet101")
        .unwrap();
    assert!((resnet.avg - 79.175).abs() < 1e-9);
    assert!(resnet.reference);
    // reference rows never enter the significance family
    if let Some(sig) = &significance {
        assert!(sig.comparisons.iter().all(|c| c.system == "toyE"));
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crisisvit"))
}

#[test]
fn binary_exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();

    // validation failure: exit 2
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        experiment_toml("bad").replace("multiclass_places", "multiclass_weather"),
    )
    .unwrap();
    let out = bin().args(["validate"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stages[0].kind"));

    // data failure: exit 3
    let missing = dir.path().join("nothere.jsonl");
    let out = bin()
        .args(["manifest", "stats"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // ok: exit 0
    let good = dir.path().join("good.toml");
    build_env(dir.path(), 49, 4);
    std::fs::write(&good, experiment_toml("good")).unwrap();
    let out = bin().args(["validate"]).arg(&good).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
}

#[test]
fn binary_runs_experiment_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    build_env(dir.path(), 98, 8);
    let path = write_experiment(dir.path(), "toyF");
    let out = bin().args(["run"]).arg(&path).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("AVG"));

    // rerun: resumed
    let out = bin().args(["run"]).arg(&path).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("resumed, nothing to do"));

    // matrix over the run directory with builtin reference rows
    let out = bin()
        .args(["matrix", "--dir"])
        .arg(dir.path().join("runs"))
        .args(["--baseline", "toyF", "--builtin-reference", "--out"])
        .arg(dir.path().join("report"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("report/report.txt").exists());
    assert!(dir.path().join("report/report.csv").exists());
    let text = std::fs::read_to_string(dir.path().join("report/report.txt")).unwrap();
    assert!(text.contains("[paper-reported]"));
    assert!(text.contains("toyF (baseline)"));
}

#[test]
fn manifest_roundtrip_through_binary() {
    let dir = tempfile::tempdir().unwrap();
    let entries = vec![
        DatasetManifestEntry::pending("a", "http://x/a").with_incidents(&["flood", "landslide"]),
        DatasetManifestEntry::pending("b", "http://x/b").with_places(&["sky"]),
    ];
    let path = dir.path().join("m.jsonl");
    save_manifest(&path, &entries).unwrap();

    let out = bin()
        .args(["manifest", "stats"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("entries:            2"));
    assert!(stdout.contains("incident-positive:  1"));

    let resolved_path = dir.path().join("resolved.jsonl");
    let out = bin()
        .args(["manifest", "resolve"])
        .arg(&path)
        .args(["--vocabulary", "incident", "--out"])
        .arg(&resolved_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&resolved_path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("\"class_index\""));
}

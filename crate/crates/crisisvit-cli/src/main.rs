use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crisisvit::data::crawl::CrawlPolicy;
use crisisvit::data::vocab::LabelVocabulary;
use crisisvit::error::Error;
use crisisvit::images::ImageStoreDir;
use crisisvit_cli::experiment::{
    collect_scorecards, dedup_scorecards, matrix_significance, run_experiment, ExperimentFile,
};
use crisisvit_cli::reference::{builtin_reference, load_reference};

/// Crisis-image classification experiments: pre-train, fine-tune, score,
/// and compare with significance testing.
#[derive(Parser)]
#[command(name = "crisisvit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an experiment file against every invariant.
    Validate { file: PathBuf },
    /// Run (or resume) an experiment end to end.
    Run {
        file: PathBuf,
        /// Override the output root directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Combine experiment scorecards found under a directory into one
    /// comparison table.
    Matrix {
        /// Directory tree to scan for scorecard.json files.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        baseline: String,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Extra reference rows (TOML) to inject, flagged as published.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Inject the built-in published baseline rows.
        #[arg(long)]
        builtin_reference: bool,
        /// Directory to write report.txt / report.csv into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a comparison table for explicit scorecard files.
    Report {
        #[arg(long)]
        baseline: String,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Scorecard JSON files.
        #[arg(long = "scorecard", required = true)]
        scorecards: Vec<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        builtin_reference: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Manifest operations: load, crawl, resolve, stats.
    Manifest {
        #[command(subcommand)]
        command: ManifestCommand,
    },
    /// Write a synthetic desk-scale environment (manifest, image store,
    /// benchmark, experiment file) ready for `crisisvit run`.
    Fixture {
        /// Directory to create the environment in.
        #[arg(long)]
        out: PathBuf,
        /// Corpus size (entries over the place vocabulary).
        #[arg(long, default_value_t = 98)]
        corpus: usize,
        /// Benchmark examples per split and task.
        #[arg(long, default_value_t = 8)]
        per_split: usize,
    },
}

#[derive(Subcommand)]
enum ManifestCommand {
    /// Parse a manifest and report per-record rejections plus counts.
    Load { file: PathBuf },
    /// Fetch pending/failed entries into a content-addressed image store.
    Crawl {
        file: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
        #[arg(long, default_value_t = 1)]
        retries: u32,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
        #[arg(long, default_value_t = 0)]
        per_host_interval_ms: u64,
        /// Where to write the updated manifest (defaults to in-place).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resolve multi-label records to single-label examples.
    Resolve {
        file: PathBuf,
        /// Label space: incident, place, or joint.
        #[arg(long)]
        vocabulary: String,
        /// Output file for resolved examples (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print summary counts for a manifest.
    Stats { file: PathBuf },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Usage(_) | Error::Vocabulary(_) => 2,
        Error::Data(_) | Error::Integrity(_) => 3,
        Error::Training(_) => 4,
        _ => 1,
    }
}

fn write_reports(
    out: Option<&PathBuf>,
    report: &crisisvit::stats::TableReport,
) -> crisisvit::Result<()> {
    println!("{}", report.text);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), &report.text)?;
        std::fs::write(dir.join("report.csv"), &report.csv)?;
        println!("wrote {} and report.csv", dir.join("report.txt").display());
    }
    Ok(())
}

fn assemble_and_emit(
    mut cards: Vec<crisisvit::stats::SystemScorecard>,
    reference: Option<&PathBuf>,
    builtin: bool,
    baseline: &str,
    alpha: f64,
    out: Option<&PathBuf>,
) -> crisisvit::Result<()> {
    if builtin {
        cards.extend(builtin_reference()?);
    }
    if let Some(path) = reference {
        cards.extend(load_reference(path)?);
    }
    let cards = dedup_scorecards(cards);
    if cards.is_empty() {
        return Err(Error::Data("no scorecards to report on".into()));
    }
    let significance = matrix_significance(&cards, baseline, alpha)?;
    let report = crisisvit::stats::emit_table(&cards, significance.as_ref(), baseline)?;
    write_reports(out, &report)
}

fn real_main() -> crisisvit::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { file } => {
            let experiment = ExperimentFile::load(&file)?;
            let violations = experiment.validate();
            if violations.is_empty() {
                println!(
                    "ok: {} (fingerprint {})",
                    file.display(),
                    &experiment.fingerprint()?[..12]
                );
                Ok(())
            } else {
                for v in &violations {
                    eprintln!("violation: {v}");
                }
                Err(Error::config(
                    "experiment",
                    format!("{} violation(s) in {}", violations.len(), file.display()),
                ))
            }
        }
        Command::Run { file, output_dir } => {
            let experiment = ExperimentFile::load(&file)?;
            let base_dir = file.parent().unwrap_or_else(|| std::path::Path::new("."));
            let outcome = run_experiment(&experiment, base_dir, output_dir.as_deref())?;
            if outcome.fully_resumed {
                println!(
                    "resumed, nothing to do (fingerprint {})",
                    &outcome.fingerprint[..12]
                );
            }
            println!("experiment {}:", experiment.id);
            for (task, scores) in &outcome.scorecard.tasks {
                println!("  {:<16} {:.2}", task.as_str(), scores.mean);
            }
            println!("  {:<16} {:.2}", "AVG", outcome.scorecard.avg);
            println!("artifacts: {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Matrix {
            dir,
            baseline,
            alpha,
            reference,
            builtin_reference: builtin,
            out,
        } => {
            let cards = collect_scorecards(&dir)?;
            if cards.is_empty() {
                return Err(Error::Data(format!(
                    "no completed experiments (scorecard.json) under {}",
                    dir.display()
                )));
            }
            assemble_and_emit(
                cards,
                reference.as_ref(),
                builtin,
                &baseline,
                alpha,
                out.as_ref(),
            )
        }
        Command::Report {
            baseline,
            alpha,
            scorecards,
            reference,
            builtin_reference: builtin,
            out,
        } => {
            let mut cards = Vec::new();
            for path in &scorecards {
                cards.push(crisisvit::stats::SystemScorecard::load(path)?);
            }
            assemble_and_emit(
                cards,
                reference.as_ref(),
                builtin,
                &baseline,
                alpha,
                out.as_ref(),
            )
        }
        Command::Manifest { command } => manifest_main(command),
        Command::Fixture {
            out,
            corpus,
            per_split,
        } => write_fixture_env(&out, corpus, per_split),
    }
}

/// Synthetic environment: class-coded PNGs in a content-addressed store, a
/// fully fetched manifest over the place vocabulary, a benchmark tree, and
/// a small experiment file wired to them.
fn write_fixture_env(
    root: &std::path::Path,
    corpus: usize,
    per_split: usize,
) -> crisisvit::Result<()> {
    use crisisvit::data::manifest::{save_manifest, DatasetManifestEntry, RetrievalStatus};
    use crisisvit::fixtures;

    let vocab = LabelVocabulary::place();
    let store = ImageStoreDir::open(root.join("store"))?;
    let mut entries = Vec::with_capacity(corpus);
    for i in 0..corpus {
        let class_index = i % vocab.len();
        let class = vocab.classes()[class_index].clone();
        let bytes = fixtures::class_image_png_bytes(class_index, vocab.len(), 16, i as u64);
        let digest = store.put(&bytes)?;
        let mut e =
            DatasetManifestEntry::pending(format!("e{i:04}"), format!("http://fixture/{i}"));
        e.place_labels = vec![class];
        e.retrieval_status = RetrievalStatus::Fetched;
        e.content_digest = Some(digest);
        entries.push(e);
    }
    save_manifest(&root.join("manifest.jsonl"), &entries)?;
    fixtures::write_benchmark_dir(&root.join("benchmark"), per_split, 16, 7)?;
    std::fs::write(root.join("experiment.toml"), FIXTURE_EXPERIMENT)?;
    println!("wrote fixture environment under {}", root.display());
    println!(
        "run it with: crisisvit run {}",
        root.join("experiment.toml").display()
    );
    Ok(())
}

const FIXTURE_EXPERIMENT: &str = r#"id = "fixture-places"
n_runs = 3
seeds = [1, 2, 3]

[model]
image_size = 16
patch_size = 8
depth = 2
hidden_dim = 32
num_heads = 4

[base]
source = "fresh"
seed = 5

[data]
manifest = "manifest.jsonl"
image_store = "store"

[[stages]]
kind = "ssl"
epochs = 2
batch_size = 32
decoder_depth = 2
decoder_dim = 32
learning_rate = 1.5e-3
seed = 2

[[stages]]
kind = "multiclass_places"
epochs = 4
batch_size = 32
learning_rate = 1e-3
seed = 3

[finetune]
benchmark_root = "benchmark"
tasks = ["disaster_types", "informativeness", "humanitarian", "damage_severity"]
epochs = 3
batch_size = 16
learning_rate = 5e-4

[report]
family = "1-experiments"
self_supervised = "fixture-corpus"
supervised = "fixture-corpus"
methodology = "Multi-Class (Places)"
epochs = "4"
"#;

fn manifest_main(command: ManifestCommand) -> crisisvit::Result<()> {
    match command {
        ManifestCommand::Load { file } => {
            let load = crisisvit::data::load_manifest(&file)?;
            for r in &load.rejected {
                eprintln!("rejected line {}: {}", r.line, r.reason);
            }
            print_summary(&load.summary);
            Ok(())
        }
        ManifestCommand::Crawl {
            file,
            store,
            concurrency,
            retries,
            timeout_ms,
            per_host_interval_ms,
            out,
        } => {
            let load = crisisvit::data::load_manifest(&file)?;
            let mut entries = load.entries;
            let store = ImageStoreDir::open(store)?;
            let policy = CrawlPolicy {
                concurrency,
                retries,
                timeout_ms,
                per_host_interval_ms,
            };
            let report = crisisvit::data::crawl(
                &mut entries,
                &policy,
                &store,
                crisisvit::deterministic_mode(),
            )?;
            crisisvit::data::save_manifest(out.as_deref().unwrap_or(&file), &entries)?;
            print!("{}", report.to_text());
            Ok(())
        }
        ManifestCommand::Resolve {
            file,
            vocabulary,
            out,
        } => {
            let vocab = match vocabulary.as_str() {
                "incident" => LabelVocabulary::incident(),
                "place" => LabelVocabulary::place(),
                "joint" => LabelVocabulary::joint(),
                other => {
                    return Err(Error::config(
                        "vocabulary",
                        format!("expected incident, place, or joint, got {other}"),
                    ))
                }
            };
            let load = crisisvit::data::load_manifest(&file)?;
            let resolved = crisisvit::data::resolve_single_label(&load.entries, &vocab)?;
            println!(
                "{} of {} entries resolve into the {} label space",
                resolved.len(),
                load.entries.len(),
                vocabulary
            );
            if let Some(out) = out {
                let mut text = String::new();
                for r in &resolved {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                std::fs::write(&out, text)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        ManifestCommand::Stats { file } => {
            let load = crisisvit::data::load_manifest(&file)?;
            print_summary(&load.summary);
            Ok(())
        }
    }
}

fn print_summary(s: &crisisvit::data::ManifestSummary) {
    println!("entries:            {}", s.total);
    println!("rejected:           {}", s.rejected);
    println!("incident-positive:  {}", s.incident_positive);
    println!("place-positive:     {}", s.place_positive);
    println!("any-positive:       {}", s.any_positive);
    println!("fetched:            {}", s.fetched);
    println!("failed:             {}", s.failed);
    println!("pending:            {}", s.pending);
    println!("retrieval fraction: {:.4}", s.retrieval_fraction());
}

fn main() -> ExitCode {
    // die quietly when stdout is a closed pipe instead of panicking
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

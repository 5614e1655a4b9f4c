//! Crisis-image classification toolkit.
//!
//! Pre-trains ViT-style encoders on a large in-domain incident-image
//! corpus (four supervised strategies plus masked-patch self-supervision),
//! then fine-tunes and scores them on the four-task crisis image benchmark
//! under a repeated-run protocol with paired significance testing.
//!
//! The crate is organized around the pipeline:
//!
//! * [`data`]: URL manifest ingestion, crawling with decay accounting,
//!   label vocabularies, and multi-label resolution.
//! * [`vit`] / [`checkpoint`]: the encoder, its parameter tree, and the
//!   on-disk checkpoint archive with training provenance.
//! * [`mae`]: masked-reconstruction self-supervised pre-training.
//! * [`pretrain`]: the supervised pre-training strategies and stage
//!   composition.
//! * [`benchmark`]: downstream task loading, fine-tuning, evaluation, and
//!   the repeated-run protocol.
//! * [`stats`]: scorecards, paired t-tests, the Holm step-down correction,
//!   and table-shaped comparison reports.

pub mod benchmark;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod images;
pub mod ledger;
pub mod mae;
pub mod pretrain;
pub mod stats;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};

/// True when the deterministic-execution environment variable is set.
/// Training is always deterministic for a fixed seed; this additionally
/// forces single-worker crawling so I/O ordering is reproducible too.
pub fn deterministic_mode() -> bool {
    std::env::var("CRISISVIT_DETERMINISTIC")
        .is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

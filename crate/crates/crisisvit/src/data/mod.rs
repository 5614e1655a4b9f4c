//! Dataset ingestion: URL manifests, retrieval tracking, label
//! vocabularies, and multi-label resolution.

pub mod crawl;
pub mod manifest;
pub mod resolve;
pub mod vocab;

pub use crawl::{crawl, CrawlPolicy, DecayReport};
pub use manifest::{
    load_manifest, load_manifest_with_vocabs, save_manifest, summarize, DatasetManifestEntry,
    ManifestLoad, ManifestSummary, RejectedRecord, RetrievalStatus,
};
pub use resolve::{
    make_binary_task, resolve_single_label, train_val_split, BinaryTask, ResolvedExample,
};
pub use vocab::{LabelVocabulary, VocabularyKind};

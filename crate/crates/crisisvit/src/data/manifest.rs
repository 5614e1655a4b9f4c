//! The URL manifest: one line-delimited JSON record per image, carrying the
//! source labels and the retrieval state. Label order is preserved exactly
//! as listed in the source manifest because it drives label resolution.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::LabelVocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStatus {
    Pending,
    Fetched,
    Failed,
}

/// One Incidents1M-style record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifestEntry {
    pub entry_id: String,
    pub url: String,
    #[serde(default)]
    pub incident_labels: Vec<String>,
    #[serde(default)]
    pub place_labels: Vec<String>,
    pub retrieval_status: RetrievalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_digest: Option<String>,
}

impl DatasetManifestEntry {
    pub fn pending(entry_id: impl Into<String>, url: impl Into<String>) -> Self {
        DatasetManifestEntry {
            entry_id: entry_id.into(),
            url: url.into(),
            incident_labels: Vec::new(),
            place_labels: Vec::new(),
            retrieval_status: RetrievalStatus::Pending,
            content_digest: None,
        }
    }

    pub fn with_incidents(mut self, labels: &[&str]) -> Self {
        self.incident_labels = labels.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_places(mut self, labels: &[&str]) -> Self {
        self.place_labels = labels.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn has_positive_label(&self) -> bool {
        !self.incident_labels.is_empty() || !self.place_labels.is_empty()
    }

    fn validate(&self, incident: &LabelVocabulary, place: &LabelVocabulary) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.incident_labels {
            if !incident.contains(l) {
                return Err(Error::Vocabulary(format!("unknown incident label {l}")));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate incident label {l}")));
            }
        }
        seen.clear();
        for l in &self.place_labels {
            if !place.contains(l) {
                return Err(Error::Vocabulary(format!("unknown place label {l}")));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate place label {l}")));
            }
        }
        if self.retrieval_status == RetrievalStatus::Fetched && self.content_digest.is_none() {
            return Err(Error::Integrity(format!(
                "entry {} marked fetched without a content digest",
                self.entry_id
            )));
        }
        Ok(())
    }
}

/// A record that could not be accepted, with its line number and reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub total: usize,
    pub rejected: usize,
    pub incident_positive: usize,
    pub place_positive: usize,
    pub any_positive: usize,
    pub fetched: usize,
    pub failed: usize,
    pub pending: usize,
}

impl ManifestSummary {
    pub fn retrieval_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.fetched as f64 / self.total as f64
        }
    }
}

#[derive(Debug)]
pub struct ManifestLoad {
    pub entries: Vec<DatasetManifestEntry>,
    pub rejected: Vec<RejectedRecord>,
    pub summary: ManifestSummary,
}

pub fn summarize(entries: &[DatasetManifestEntry], rejected: usize) -> ManifestSummary {
    let mut s = ManifestSummary {
        total: entries.len(),
        rejected,
        ..ManifestSummary::default()
    };
    for e in entries {
        if !e.incident_labels.is_empty() {
            s.incident_positive += 1;
        }
        if !e.place_labels.is_empty() {
            s.place_positive += 1;
        }
        if e.has_positive_label() {
            s.any_positive += 1;
        }
        match e.retrieval_status {
            RetrievalStatus::Fetched => s.fetched += 1,
            RetrievalStatus::Failed => s.failed += 1,
            RetrievalStatus::Pending => s.pending += 1,
        }
    }
    s
}

/// Load a manifest file against the default vocabularies.
pub fn load_manifest(path: &Path) -> Result<ManifestLoad> {
    load_manifest_with_vocabs(
        path,
        &LabelVocabulary::incident(),
        &LabelVocabulary::place(),
    )
}

/// Load a manifest file. Malformed lines and records with unknown labels
/// are rejected with a line-numbered reason; everything else parses.
pub fn load_manifest_with_vocabs(
    path: &Path,
    incident: &LabelVocabulary,
    place: &LabelVocabulary,
) -> Result<ManifestLoad> {
    let file =
        File::open(path).map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: DatasetManifestEntry = match serde_json::from_str(&line) {
            Ok(e) => e,
            Err(e) => {
                rejected.push(RejectedRecord {
                    line: lineno,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        match entry.validate(incident, place) {
            Ok(()) => entries.push(entry),
            Err(e) => rejected.push(RejectedRecord {
                line: lineno,
                reason: e.to_string(),
            }),
        }
    }
    let summary = summarize(&entries, rejected.len());
    Ok(ManifestLoad {
        entries,
        rejected,
        summary,
    })
}

/// Write entries as line-delimited JSON (atomic replace).
pub fn save_manifest(path: &Path, entries: &[DatasetManifestEntry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for e in entries {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn empty_file_loads_cleanly() {
        let f = write_lines(&[]);
        let load = load_manifest(f.path()).unwrap();
        assert_eq!(load.entries.len(), 0);
        assert_eq!(load.summary, ManifestSummary::default());
    }

    #[test]
    fn counts_follow_labels() {
        let f = write_lines(&[
            r#"{"entry_id":"a","url":"http://x/a","incident_labels":["flood","landslide"],"place_labels":[],"retrieval_status":"pending"}"#,
            r#"{"entry_id":"b","url":"http://x/b","incident_labels":[],"place_labels":["forest"],"retrieval_status":"pending"}"#,
            r#"{"entry_id":"c","url":"http://x/c","incident_labels":[],"place_labels":[],"retrieval_status":"pending"}"#,
        ]);
        let load = load_manifest(f.path()).unwrap();
        assert_eq!(load.summary.total, 3);
        assert_eq!(load.summary.incident_positive, 1);
        assert_eq!(load.summary.place_positive, 1);
        assert_eq!(load.summary.any_positive, 2);
    }

    #[test]
    fn unknown_label_rejected_with_line_number() {
        let f = write_lines(&[
            r#"{"entry_id":"a","url":"http://x/a","incident_labels":["flood"],"place_labels":[],"retrieval_status":"pending"}"#,
            r#"{"entry_id":"b","url":"http://x/b","incident_labels":["weather_balloon"],"place_labels":[],"retrieval_status":"pending"}"#,
        ]);
        let load = load_manifest(f.path()).unwrap();
        assert_eq!(load.entries.len(), 1);
        assert_eq!(load.rejected.len(), 1);
        assert_eq!(load.rejected[0].line, 2);
        assert!(load.rejected[0].reason.contains("weather_balloon"));
    }

    #[test]
    fn malformed_line_rejected() {
        let f = write_lines(&["{not json"]);
        let load = load_manifest(f.path()).unwrap();
        assert_eq!(load.entries.len(), 0);
        assert_eq!(load.rejected.len(), 1);
        assert!(load.rejected[0].reason.contains("malformed"));
    }

    #[test]
    fn fetched_requires_digest() {
        let f = write_lines(&[
            r#"{"entry_id":"a","url":"http://x/a","incident_labels":[],"place_labels":[],"retrieval_status":"fetched"}"#,
        ]);
        let load = load_manifest(f.path()).unwrap();
        assert_eq!(load.entries.len(), 0);
        assert!(load.rejected[0].reason.contains("digest"));
    }

    #[test]
    fn save_load_roundtrip() {
        let entries = vec![
            DatasetManifestEntry::pending("a", "http://x/a").with_incidents(&["flood"]),
            DatasetManifestEntry::pending("b", "http://x/b").with_places(&["sky", "ocean"]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&path, &entries).unwrap();
        let load = load_manifest(&path).unwrap();
        assert_eq!(load.entries, entries);
    }
}

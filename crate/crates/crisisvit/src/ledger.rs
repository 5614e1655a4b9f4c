//! Append-only run ledger: line-delimited JSON records of stage lifecycle
//! events and per-epoch metrics. Records are flushed as they are written so
//! a killed process leaves a readable prefix behind for resumption.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEvent {
    StageStart {
        stage: String,
        fingerprint: String,
    },
    EpochMetric {
        stage: String,
        epoch: usize,
        step: usize,
        loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        accuracy: Option<f64>,
        wall_time: f64,
    },
    StageFinish {
        stage: String,
        fingerprint: String,
        checkpoint_digest: String,
        wall_time: f64,
    },
    StageSkipped {
        stage: String,
        reason: String,
    },
    RunRecorded {
        task: String,
        seed: u64,
        accuracy: f64,
    },
    Failure {
        stage: String,
        message: String,
    },
    Note {
        message: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub timestamp: f64,
    #[serde(flatten)]
    pub event: LedgerEvent,
}

enum Sink {
    Disabled,
    File(Mutex<File>),
}

/// Handle for appending ledger records. A disabled ledger swallows writes,
/// which keeps desk-scale library tests free of filesystem traffic.
pub struct RunLedger {
    sink: Sink,
    path: Option<PathBuf>,
}

impl RunLedger {
    pub fn disabled() -> Self {
        RunLedger {
            sink: Sink::Disabled,
            path: None,
        }
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(RunLedger {
            sink: Sink::File(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, event: LedgerEvent) -> Result<()> {
        match &self.sink {
            Sink::Disabled => Ok(()),
            Sink::File(file) => {
                let record = LedgerRecord {
                    timestamp: SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs_f64())
                        .unwrap_or(0.0),
                    event,
                };
                let line = serde_json::to_string(&record)?;
                let mut guard = file.lock().expect("ledger lock");
                writeln!(guard, "{line}")?;
                guard.flush()?;
                Ok(())
            }
        }
    }

    /// Read every record from a ledger file, skipping a trailing partial
    /// line if the writer died mid-record.
    pub fn read_all(path: &Path) -> Result<Vec<LedgerRecord>> {
        let file = File::open(path)?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LedgerRecord>(&line) {
                Ok(r) => records.push(r),
                Err(_) => break,
            }
        }
        Ok(records)
    }
}

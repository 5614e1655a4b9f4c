//! Reference scorecards for published baseline systems, injected into
//! comparison tables and flagged as non-reproduced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crisisvit::benchmark::TaskId;
use crisisvit::error::{Error, Result};
use crisisvit::stats::{scorecard, ScorecardMeta, SystemScorecard};

/// Rows shipped with the toolkit.
pub const BUILTIN_REFERENCE_TOML: &str = include_str!("../reference/published_baselines.toml");

#[derive(Debug, Deserialize)]
struct ReferenceFile {
    #[serde(default)]
    systems: Vec<ReferenceRow>,
}

#[derive(Debug, Deserialize)]
struct ReferenceRow {
    system: String,
    #[serde(default)]
    family: String,
    #[serde(default)]
    self_supervised: String,
    #[serde(default)]
    supervised: String,
    #[serde(default)]
    methodology: String,
    #[serde(default)]
    epochs: String,
    disaster_types: f64,
    informativeness: f64,
    humanitarian: f64,
    damage_severity: f64,
    #[serde(default)]
    training_hours: Option<f64>,
}

fn rows_to_scorecards(file: ReferenceFile) -> Result<Vec<SystemScorecard>> {
    let mut cards = Vec::with_capacity(file.systems.len());
    for row in file.systems {
        let mut runs = BTreeMap::new();
        runs.insert(TaskId::DisasterTypes, vec![row.disaster_types]);
        runs.insert(TaskId::Informativeness, vec![row.informativeness]);
        runs.insert(TaskId::Humanitarian, vec![row.humanitarian]);
        runs.insert(TaskId::DamageSeverity, vec![row.damage_severity]);
        let meta = ScorecardMeta {
            family: if row.family.is_empty() {
                "0-published-baselines".into()
            } else {
                row.family
            },
            self_supervised: row.self_supervised,
            supervised: row.supervised,
            methodology: row.methodology,
            epochs: row.epochs,
            reference: true,
            training_hours: row.training_hours,
        };
        cards.push(scorecard(row.system, meta, &runs)?);
    }
    Ok(cards)
}

pub fn builtin_reference() -> Result<Vec<SystemScorecard>> {
    let file: ReferenceFile = toml::from_str(BUILTIN_REFERENCE_TOML)
        .map_err(|e| Error::Data(format!("builtin reference rows: {e}")))?;
    rows_to_scorecards(file)
}

pub fn load_reference(path: &Path) -> Result<Vec<SystemScorecard>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("reference file {}: {e}", path.display())))?;
    let file: ReferenceFile = toml::from_str(&text)
        .map_err(|e| Error::Data(format!("reference file {}: {e}", path.display())))?;
    rows_to_scorecards(file)
}

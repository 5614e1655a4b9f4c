//! Label vocabularies: ordered, versioned class lists.
//!
//! The incident and place vocabularies carry exactly 43 and 49 classes;
//! the joint vocabulary is their concatenation (incident classes first,
//! indices 0-42, places 43-91). Benchmark task vocabularies are fixed at
//! 7/2/4/3 classes. Loading anything of the wrong size fails.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::TaskId;
use crate::error::{Error, Result};

pub const NUM_INCIDENT_CLASSES: usize = 43;
pub const NUM_PLACE_CLASSES: usize = 49;
pub const NUM_JOINT_CLASSES: usize = NUM_INCIDENT_CLASSES + NUM_PLACE_CLASSES;

/// Default incident-type classes (43), in canonical order.
pub const INCIDENT_CLASSES: [&str; NUM_INCIDENT_CLASSES] = [
    "airplane_accident",
    "bicycle_accident",
    "blocked",
    "burned",
    "bus_accident",
    "car_accident",
    "collapsed",
    "damaged",
    "derecho",
    "dirty_contaminated",
    "drought",
    "dust_devil",
    "dust_sand_storm",
    "earthquake",
    "fire",
    "fire_whirl",
    "flood",
    "fog",
    "hailstorm",
    "heavy_rainfall",
    "ice_storm",
    "landfall",
    "landslide",
    "motorcycle_accident",
    "mudslide_mudflow",
    "nuclear_explosion",
    "oil_spill",
    "rockslide_rockfall",
    "ship_boat_accident",
    "sinkhole",
    "snow_covered",
    "snowslide_avalanche",
    "storm_surge",
    "thunderstorm",
    "tornado",
    "traffic_jam",
    "train_accident",
    "tropical_cyclone",
    "truck_accident",
    "under_construction",
    "van_accident",
    "volcanic_eruption",
    "wildfire",
];

/// Default place classes (49), in canonical order.
pub const PLACE_CLASSES: [&str; NUM_PLACE_CLASSES] = [
    "airport",
    "badlands",
    "beach",
    "bridge",
    "building_facade",
    "building_outdoor",
    "canyon",
    "coast",
    "construction_site",
    "dam",
    "desert",
    "downtown",
    "excavation",
    "farm",
    "field",
    "forest",
    "gas_station",
    "glacier",
    "harbor",
    "highway",
    "house",
    "industrial_area",
    "island",
    "junkyard",
    "lake",
    "lighthouse",
    "mountain",
    "nuclear_power_plant",
    "ocean",
    "oil_rig",
    "park",
    "parking_lot",
    "pier",
    "playground",
    "power_line",
    "railroad_track",
    "residential_neighborhood",
    "river",
    "sky",
    "skyscraper",
    "slum",
    "snowfield",
    "stadium",
    "street",
    "tunnel",
    "valley",
    "village",
    "volcano",
    "waterfall",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyKind {
    Incident,
    Place,
    Joint,
    Task(TaskId),
    /// Unconstrained vocabulary for desk-scale experiments.
    Custom(String),
}

impl VocabularyKind {
    /// Required class count, when the kind constrains it.
    pub fn required_len(&self) -> Option<usize> {
        match self {
            VocabularyKind::Incident => Some(NUM_INCIDENT_CLASSES),
            VocabularyKind::Place => Some(NUM_PLACE_CLASSES),
            VocabularyKind::Joint => Some(NUM_JOINT_CLASSES),
            VocabularyKind::Task(task) => Some(task.num_classes()),
            VocabularyKind::Custom(_) => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            VocabularyKind::Incident => "incident".into(),
            VocabularyKind::Place => "place".into(),
            VocabularyKind::Joint => "joint".into(),
            VocabularyKind::Task(task) => format!("task:{}", task.as_str()),
            VocabularyKind::Custom(name) => format!("custom:{name}"),
        }
    }
}

/// An ordered, versioned class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub kind: VocabularyKind,
    classes: Vec<String>,
    digest: String,
}

fn vocabulary_digest(kind: &VocabularyKind, classes: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.label().as_bytes());
    for c in classes {
        hasher.update(b"\x1f");
        hasher.update(c.as_bytes());
    }
    hex::encode(hasher.finalize())
}

impl LabelVocabulary {
    pub fn from_classes(kind: VocabularyKind, classes: Vec<String>) -> Result<Self> {
        if let Some(required) = kind.required_len() {
            if classes.len() != required {
                return Err(Error::Vocabulary(format!(
                    "{} vocabulary must have {} classes, got {}",
                    kind.label(),
                    required,
                    classes.len()
                )));
            }
        }
        if classes.is_empty() {
            return Err(Error::Vocabulary("vocabulary must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if !seen.insert(c.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate class name {c}")));
            }
        }
        let digest = vocabulary_digest(&kind, &classes);
        Ok(LabelVocabulary {
            kind,
            classes,
            digest,
        })
    }

    /// The built-in incident vocabulary (43 classes).
    pub fn incident() -> Self {
        Self::from_classes(
            VocabularyKind::Incident,
            INCIDENT_CLASSES.iter().map(|s| s.to_string()).collect(),
        )
        .expect("builtin incident vocabulary is valid")
    }

    /// The built-in place vocabulary (49 classes).
    pub fn place() -> Self {
        Self::from_classes(
            VocabularyKind::Place,
            PLACE_CLASSES.iter().map(|s| s.to_string()).collect(),
        )
        .expect("builtin place vocabulary is valid")
    }

    /// Joint vocabulary: incident classes first (0-42), then places (43-91).
    pub fn joint() -> Self {
        let classes = INCIDENT_CLASSES
            .iter()
            .chain(PLACE_CLASSES.iter())
            .map(|s| s.to_string())
            .collect();
        Self::from_classes(VocabularyKind::Joint, classes)
            .expect("builtin joint vocabulary is valid")
    }

    pub fn for_task(task: TaskId) -> Self {
        Self::from_classes(
            VocabularyKind::Task(task),
            task.class_names().iter().map(|s| s.to_string()).collect(),
        )
        .expect("builtin task vocabulary is valid")
    }

    pub fn custom(name: impl Into<String>, classes: Vec<String>) -> Result<Self> {
        Self::from_classes(VocabularyKind::Custom(name.into()), classes)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn contains(&self, class: &str) -> bool {
        self.index_of(class).is_some()
    }

    pub fn class_at(&self, index: usize) -> Result<&str> {
        self.classes
            .get(index)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocabulary(format!("class index {index} out of range")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_sizes_are_exact() {
        assert_eq!(LabelVocabulary::incident().len(), 43);
        assert_eq!(LabelVocabulary::place().len(), 49);
        assert_eq!(LabelVocabulary::joint().len(), 92);
        assert_eq!(LabelVocabulary::for_task(TaskId::DisasterTypes).len(), 7);
        assert_eq!(LabelVocabulary::for_task(TaskId::Informativeness).len(), 2);
        assert_eq!(LabelVocabulary::for_task(TaskId::Humanitarian).len(), 4);
        assert_eq!(LabelVocabulary::for_task(TaskId::DamageSeverity).len(), 3);
    }

    #[test]
    fn joint_orders_incidents_before_places() {
        let joint = LabelVocabulary::joint();
        assert_eq!(joint.index_of("airplane_accident"), Some(0));
        assert_eq!(
            joint.index_of("fire"),
            LabelVocabulary::incident().index_of("fire")
        );
        assert_eq!(
            joint.index_of("forest"),
            LabelVocabulary::place().index_of("forest").map(|i| i + 43)
        );
    }

    #[test]
    fn wrong_size_fails_loading() {
        let short: Vec<String> = INCIDENT_CLASSES[..40]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert!(matches!(
            LabelVocabulary::from_classes(VocabularyKind::Incident, short),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn duplicates_fail_loading() {
        let mut classes: Vec<String> = INCIDENT_CLASSES.iter().map(|s| s.to_string()).collect();
        classes[1] = classes[0].clone();
        assert!(matches!(
            LabelVocabulary::from_classes(VocabularyKind::Incident, classes),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn digest_versions_the_class_list() {
        let a = LabelVocabulary::incident();
        let mut classes: Vec<String> = INCIDENT_CLASSES.iter().map(|s| s.to_string()).collect();
        classes.swap(0, 1);
        let b = LabelVocabulary::from_classes(VocabularyKind::Incident, classes).unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn custom_vocabulary_is_unconstrained() {
        let v = LabelVocabulary::custom("toy", vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(v.len(), 3);
    }
}

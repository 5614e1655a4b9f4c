//! Checkpoints: a named parameter tree plus the model config and the
//! append-only provenance of every training stage that produced it.
//!
//! On disk a checkpoint is a single archive: a fixed magic/version header,
//! a JSON metadata document (config, provenance, array index), then the
//! raw little-endian `f64` array data. Loading rejects unknown format
//! versions and any parameter tree that does not exactly match the tree
//! the model config determines.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::images::Normalization;
use crate::vit::{expected_param_specs, ModelConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CVCK";

/// Ordered parameter tree. Insertion order is canonical (spec order), and
/// lookups are by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        if let Some(idx) = self.names.iter().position(|n| *n == name) {
            self.values[idx] = value;
        } else {
            self.names.push(name);
            self.values.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.values[i])
            .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.values[i]),
            None => Err(Error::Integrity(format!("missing parameter {name}"))),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let idx = self.index_of(name)?;
        self.names.remove(idx);
        Some(self.values.remove(idx))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.names.iter().zip(self.values.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value_at(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// One training-stage descriptor in a checkpoint's provenance chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub dataset: String,
    pub strategy: String,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ProvenanceRecord {
    pub fn stage(
        dataset: impl Into<String>,
        strategy: impl Into<String>,
        epochs: usize,
        seed: u64,
    ) -> Self {
        ProvenanceRecord {
            dataset: dataset.into(),
            strategy: strategy.into(),
            epochs,
            seed,
            vocabulary_digest: None,
            normalization: None,
            detail: None,
        }
    }

    pub fn head_replacement(num_classes: usize, seed: u64) -> Self {
        ProvenanceRecord {
            dataset: "none".into(),
            strategy: "head_replacement".into(),
            epochs: 0,
            seed,
            vocabulary_digest: None,
            normalization: None,
            detail: Some(format!("num_classes={num_classes}")),
        }
    }

    pub fn with_vocabulary(mut self, digest: impl Into<String>) -> Self {
        self.vocabulary_digest = Some(digest.into());
        self
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = Some(normalization);
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterCheckpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub params: ParamSet,
    pub provenance: Vec<ProvenanceRecord>,
}

#[derive(Serialize, Deserialize)]
struct ArrayIndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    model_config: ModelConfig,
    provenance: Vec<ProvenanceRecord>,
    arrays: Vec<ArrayIndexEntry>,
}

impl ParameterCheckpoint {
    /// Verify the parameter tree is exactly the one the config determines:
    /// no missing parameters, no orphans, matching shapes.
    pub fn validate(&self) -> Result<()> {
        self.model_config.validate()?;
        let specs = expected_param_specs(&self.model_config);
        let expected: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let present: BTreeSet<&str> = self.params.names().iter().map(|s| s.as_str()).collect();

        let missing: Vec<&str> = expected.difference(&present).copied().collect();
        let orphan: Vec<&str> = present.difference(&expected).copied().collect();
        if !missing.is_empty() || !orphan.is_empty() {
            return Err(Error::Integrity(format!(
                "parameter tree mismatch; missing: [{}], orphan: [{}]",
                missing.join(", "),
                orphan.join(", ")
            )));
        }
        for s in &specs {
            let v = self.params.get(&s.name)?;
            if v.shape() != s.shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    v.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    /// Content digest over metadata and parameter data; two checkpoints with
    /// equal digests are byte-identical on disk.
    pub fn digest(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Digest of the provenance chain alone; identifies the training recipe
    /// regardless of parameter values.
    pub fn provenance_digest(&self) -> String {
        let json = serde_json::to_string(&self.provenance).expect("provenance serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn push_provenance(&mut self, record: ProvenanceRecord) {
        self.provenance.push(record);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut offset = 0u64;
        for (name, value) in self.params.iter() {
            let len = value.len() as u64;
            arrays.push(ArrayIndexEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let meta = CheckpointMeta {
            format_version: self.format_version,
            model_config: self.model_config.clone(),
            provenance: self.provenance.clone(),
            arrays,
        };
        let meta_json = serde_json::to_vec(&meta)?;

        let mut out = Vec::with_capacity(16 + meta_json.len() + offset as usize * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        for (_, value) in self.params.iter() {
            let std = value.as_standard_layout();
            for &v in std.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unknown checkpoint format_version {version}"),
            ));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + meta_len {
            return Err(Error::Integrity("truncated checkpoint metadata".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + meta_len])?;
        if meta.format_version != version {
            return Err(Error::Integrity("header/metadata version mismatch".into()));
        }
        let data = &bytes[16 + meta_len..];
        let mut params = ParamSet::new();
        for entry in &meta.arrays {
            let start = entry.offset as usize * 8;
            let end = start + entry.len as usize * 8;
            if end > data.len() {
                return Err(Error::Integrity(format!(
                    "array {} extends past end of archive",
                    entry.name
                )));
            }
            let mut values = Vec::with_capacity(entry.len as usize);
            for chunk in data[start..end].chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            let arr = Tensor::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| Error::Integrity(format!("array {}: {e}", entry.name)))?;
            params.insert(entry.name.clone(), arr);
        }
        let ckpt = ParameterCheckpoint {
            format_version: version,
            model_config: meta.model_config,
            params,
            provenance: meta.provenance,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::images::{ImageTensorBatch, Normalization};
    use crate::vit::{build_model, forward_tokens, ModelConfig};
    use ndarray::Array4;

    #[test]
    fn roundtrip_preserves_forward_outputs() {
        let config = ModelConfig::tiny(3);
        let mut ckpt = build_model(&config, 17).unwrap();
        ckpt.push_provenance(ProvenanceRecord::stage("toy", "multiclass_places", 2, 17));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cvck");
        ckpt.save(&path).unwrap();
        let loaded = ParameterCheckpoint::load(&path).unwrap();

        assert_eq!(loaded.provenance, ckpt.provenance);
        let batch = ImageTensorBatch {
            pixels: Array4::from_shape_fn((2, 3, 16, 16), |(b, c, y, x)| {
                ((b + c + y + x) as f64 * 0.37).sin()
            }),
            ids: vec!["a".into(), "b".into()],
            normalization: Normalization::unit(),
        };
        let before = forward_tokens(&ckpt, &batch).unwrap();
        let after = forward_tokens(&loaded, &batch).unwrap();
        let max_diff = before
            .iter()
            .zip(after.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-6, "roundtrip drift {max_diff}");
    }

    #[test]
    fn unknown_format_version_rejected() {
        let config = ModelConfig::tiny(2);
        let ckpt = build_model(&config, 1).unwrap();
        let mut bytes = ckpt.to_bytes().unwrap();
        bytes[4] = 99;
        match ParameterCheckpoint::from_bytes(&bytes) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "format_version"),
            other => panic!("expected format_version error, got {other:?}"),
        }
    }

    #[test]
    fn orphan_and_missing_params_reported() {
        let config = ModelConfig::tiny(2);
        let mut ckpt = build_model(&config, 1).unwrap();
        ckpt.params.remove("norm.bias");
        ckpt.params
            .insert("extra.weight".into(), Tensor::zeros(IxDyn(&[1])));
        match ckpt.validate() {
            Err(Error::Integrity(msg)) => {
                assert!(msg.contains("norm.bias"));
                assert!(msg.contains("extra.weight"));
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn digest_tracks_content() {
        let config = ModelConfig::tiny(2);
        let a = build_model(&config, 1).unwrap();
        let b = build_model(&config, 1).unwrap();
        let c = build_model(&config, 2).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }
}

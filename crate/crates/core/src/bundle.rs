//! The model bundle: one tar archive holding `config.json` and the weight
//! blobs of every member head as little-endian `f32`, row-major.
//!
//! Archives are written with fixed headers (zero mtime, uid and gid) in a
//! fixed entry order, so equal bundles produce equal bytes. The bundle's
//! version string is the SHA-256 of those bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationMix;
use crate::classifier::{Activation, Ensemble, EvalReport, HeadModel, Model, Normalization};
use crate::error::{Error, Result};
use crate::interpret::{FeedbackConfig, FeedbackRule};
use crate::pipeline::GateConfig;

pub const FORMAT_VERSION: u32 = 1;
const CONFIG_ENTRY: &str = "config.json";

/// Everything needed to screen an image, as trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub model: Model,
    pub augment: AugmentationMix,
    pub gate: GateConfig,
    pub feedback: FeedbackConfig,
    pub feedback_rules: Vec<FeedbackRule>,
    /// Test-split report recorded at training time, if any.
    pub metrics: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub name: String,
    pub path: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberConfig {
    pub provider: String,
    pub d: usize,
    pub hidden: usize,
    pub seed: u64,
    pub activation: Activation,
    pub normalization: Normalization,
    pub blobs: Vec<BlobSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Single,
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub format_version: u32,
    pub kind: ModelKind,
    pub members: Vec<MemberConfig>,
    pub augment: AugmentationMix,
    pub gate: GateConfig,
    pub feedback: FeedbackConfig,
    pub feedback_rules: Vec<FeedbackRule>,
    #[serde(default)]
    pub metrics: Option<EvalReport>,
}

/// Summary served to clients; contains no weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub model_version: String,
    pub kind: ModelKind,
    pub members: usize,
    pub providers: Vec<String>,
    pub feature_dims: Vec<usize>,
    pub confidence_threshold: f64,
    pub gate: GateConfig,
    pub augment: AugmentationMix,
    pub feedback_rules: Vec<FeedbackRule>,
    pub metrics: Option<EvalReport>,
}

fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder
        .append_data(&mut header, path, data)
        .map_err(|e| Error::Bundle(format!("writing {path}: {e}")))
}

/// Lowercase hex SHA-256; the version string of an archive.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelBundle {
    pub fn single(head: HeadModel) -> Self {
        Self::new(Model::Single(head))
    }

    pub fn new(model: Model) -> Self {
        Self {
            model,
            augment: AugmentationMix::none(),
            gate: GateConfig::default(),
            feedback: FeedbackConfig::default(),
            feedback_rules: Vec::new(),
            metrics: None,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self.model {
            Model::Single(_) => ModelKind::Single,
            Model::Ensemble(_) => ModelKind::Ensemble,
        }
    }

    fn config(&self) -> BundleConfig {
        let members = self
            .model
            .members()
            .iter()
            .enumerate()
            .map(|(i, m)| MemberConfig {
                provider: m.provider.clone(),
                d: m.d,
                hidden: m.hidden,
                seed: m.seed,
                activation: m.activation,
                normalization: m.norm.clone(),
                blobs: m
                    .blocks()
                    .iter()
                    .zip(m.block_shapes())
                    .map(|((name, _), (r, c))| BlobSpec {
                        name: name.to_string(),
                        path: format!("member-{i}/{name}.f32"),
                        shape: [r, c],
                    })
                    .collect(),
            })
            .collect();
        BundleConfig {
            format_version: FORMAT_VERSION,
            kind: self.kind(),
            members,
            augment: self.augment.clone(),
            gate: self.gate,
            feedback: self.feedback.clone(),
            feedback_rules: self.feedback_rules.clone(),
            metrics: self.metrics.clone(),
        }
    }

    /// Serialises to archive bytes. Weights are stored at single precision.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for m in self.model.members() {
            m.validate()?;
        }
        let config = self.config();
        let mut builder = tar::Builder::new(Vec::new());
        append(&mut builder, CONFIG_ENTRY, &serde_json::to_vec_pretty(&config)?)?;
        for (m, mc) in self.model.members().iter().zip(&config.members) {
            for ((_, values), blob) in m.blocks().iter().zip(&mc.blobs) {
                append(&mut builder, &blob.path, &encode_f32(values))?;
            }
        }
        builder.into_inner().map_err(|e| Error::Bundle(e.to_string()))
    }

    /// Writes the archive and returns its version string.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Parses and validates archive bytes, returning the bundle and its version.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut entries: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut archive = tar::Archive::new(bytes);
        for entry in archive.entries().map_err(|e| Error::Bundle(e.to_string()))? {
            let mut entry = entry.map_err(|e| Error::Bundle(e.to_string()))?;
            let path = entry
                .path()
                .map_err(|e| Error::Bundle(e.to_string()))?
                .to_string_lossy()
                .into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(|e| Error::Bundle(format!("{path}: {e}")))?;
            entries.insert(path, data);
        }
        let raw = entries
            .get(CONFIG_ENTRY)
            .ok_or_else(|| Error::Bundle(format!("archive has no {CONFIG_ENTRY}")))?;
        let config: BundleConfig =
            serde_json::from_slice(raw).map_err(|e| Error::Bundle(format!("{CONFIG_ENTRY}: {e}")))?;
        if config.format_version != FORMAT_VERSION {
            return Err(Error::Bundle(format!("unsupported format version {}", config.format_version)));
        }
        let mut heads = Vec::with_capacity(config.members.len());
        for mc in &config.members {
            let mut head = HeadModel {
                provider: mc.provider.clone(),
                seed: mc.seed,
                activation: mc.activation,
                norm: mc.normalization.clone(),
                d: mc.d,
                hidden: mc.hidden,
                w1: Vec::new(),
                b1: Vec::new(),
                w2: Vec::new(),
                b2: Vec::new(),
            };
            let shapes = head.block_shapes();
            for ((name, slot), (r, c)) in head.blocks_mut().into_iter().zip(shapes) {
                let blob = mc
                    .blobs
                    .iter()
                    .find(|b| b.name == name)
                    .ok_or_else(|| Error::Bundle(format!("member blob {name} is not declared")))?;
                if blob.shape != [r, c] {
                    return Err(Error::Bundle(format!(
                        "blob {} declares shape {:?}, expected [{r}, {c}]",
                        blob.path, blob.shape
                    )));
                }
                let data = entries
                    .get(&blob.path)
                    .ok_or_else(|| Error::Bundle(format!("archive is missing {}", blob.path)))?;
                if data.len() != 4 * r * c {
                    return Err(Error::Bundle(format!("{} holds {} bytes, expected {}", blob.path, data.len(), 4 * r * c)));
                }
                *slot = decode_f32(data);
            }
            head.validate()?;
            heads.push(head);
        }
        let model = match (config.kind, heads.len()) {
            (ModelKind::Single, 1) => Model::Single(heads.pop().expect("one member")),
            (ModelKind::Ensemble, _) => Model::Ensemble(Ensemble::new(heads).map_err(|e| Error::Bundle(e.to_string()))?),
            (ModelKind::Single, n) => return Err(Error::Bundle(format!("single model declares {n} members"))),
        };
        config.augment.validate().map_err(|e| Error::Bundle(e.to_string()))?;
        let bundle = Self {
            model,
            augment: config.augment,
            gate: config.gate,
            feedback: config.feedback,
            feedback_rules: config.feedback_rules,
            metrics: config.metrics,
        };
        Ok((bundle, sha256_hex(bytes)))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn metadata(&self, version: &str) -> BundleMetadata {
        let members = self.model.members();
        BundleMetadata {
            model_version: version.to_string(),
            kind: self.kind(),
            members: members.len(),
            providers: members.iter().map(|m| m.provider.clone()).collect(),
            feature_dims: members.iter().map(|m| m.d).collect(),
            confidence_threshold: self.feedback.confidence_threshold,
            gate: self.gate,
            augment: self.augment.clone(),
            feedback_rules: self.feedback_rules.clone(),
            metrics: self.metrics.clone(),
        }
    }
}

//! TOML configuration shared by the CLI and the service.
//!
//! ```toml
//! [gate]
//! max_area_frac = 0.25
//!
//! [train]
//! max_epochs = 50
//!
//! [augment]
//! preset = "mix-best"          # or a list of [[augment.specs]] tables
//!
//! [feedback]
//! confidence_threshold = 0.8
//!
//! [service]
//! bind = "127.0.0.1:8080"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationMix, AugmentationSpec};
use crate::classifier::TrainConfig;
use crate::dataset::SplitRatios;
use crate::error::{Error, Result};
use crate::interpret::{FeedbackConfig, OcclusionConfig, TsneConfig};
use crate::pipeline::GateConfig;

/// Largest accepted upload.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub preset: Option<String>,
    pub specs: Vec<AugmentationSpec>,
}

impl AugmentSection {
    pub fn mix(&self) -> Result<AugmentationMix> {
        let mix = match (&self.preset, self.specs.is_empty()) {
            (Some(_), false) => return Err(Error::config("[augment] takes either `preset` or `specs`, not both")),
            (Some(name), true) => {
                AugmentationMix::preset(name).ok_or_else(|| Error::config(format!("unknown augmentation preset `{name}`")))?
            }
            (None, _) => AugmentationMix {
                specs: self.specs.clone(),
            },
        };
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorChoice {
    /// Built-in colour-based detector only.
    #[default]
    Fallback,
    /// Remote eye detection (endpoint and key from the environment), falling
    /// back to the built-in detector when it fails.
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub bundle: Option<PathBuf>,
    pub max_upload_bytes: usize,
    /// Directory uploads are copied to; nothing is persisted when unset.
    pub retain_uploads: Option<PathBuf>,
    pub detector: DetectorChoice,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            bundle: None,
            max_upload_bytes: MAX_UPLOAD_BYTES,
            retain_uploads: None,
            detector: DetectorChoice::Fallback,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub gate: GateConfig,
    pub train: TrainConfig,
    pub augment: AugmentSection,
    pub feedback: FeedbackConfig,
    pub service: ServiceConfig,
    pub split: SplitRatios,
    pub occlusion: OcclusionConfig,
    pub tsne: TsneConfig,
}

impl AppConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.mix()?;
        SplitRatios::new(self.split.train, self.split.validation, self.split.test)?;
        let g = &self.gate;
        if !(0.0 <= g.min_area_frac && g.min_area_frac < g.max_area_frac && g.max_elongation >= 1.0) {
            return Err(Error::config(format!("invalid gate thresholds {g:?}")));
        }
        let f = &self.feedback;
        if !(0.5..=1.0).contains(&f.confidence_threshold) {
            return Err(Error::config("feedback.confidence_threshold must lie in [0.5, 1]"));
        }
        if self.service.max_upload_bytes == 0 {
            return Err(Error::config("service.max_upload_bytes must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises to TOML")
    }
}

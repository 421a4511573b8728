//! One screening request: decode, locate, gate, classify, advise.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use redreflex::bundle::ModelBundle;
use redreflex::classifier::{confidence, decide, Providers};
use redreflex::dataset::Label;
use redreflex::imaging::{compute_properties, PropertyVector};
use redreflex::interpret::{generate_feedback, no_eye_feedback, verdict_feedback, FeedbackItem};
use redreflex::pipeline::{analyze_eye, Detector, Verdict};
use redreflex::{Error, RgbImage};

/// Which eye the uploaded image shows. Left eyes are mirrored so every eye
/// reaches the model in the right-eye orientation; `auto` takes the first
/// (leftmost) eye the detector reports in a face image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeChoice {
    Left,
    #[default]
    Right,
    Auto,
}

impl FromStr for EyeChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            "auto" => Ok(Self::Auto),
            other => Err(format!("eye must be left, right or auto, got `{other}`")),
        }
    }
}

/// Gate outcome including the case where no eye was found.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenVerdict {
    Usable,
    TooBig,
    TooSmall,
    TooElongated,
    NoReflex,
    NoEye,
}

impl From<Verdict> for ScreenVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Usable => Self::Usable,
            Verdict::TooBig => Self::TooBig,
            Verdict::TooSmall => Self::TooSmall,
            Verdict::TooElongated => Self::TooElongated,
            Verdict::NoReflex => Self::NoReflex,
        }
    }
}

/// Milliseconds spent per stage. The stages are timed back to back, so they
/// add up to `total_ms`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub decode_ms: f64,
    pub detect_ms: f64,
    pub reflex_ms: f64,
    pub properties_ms: f64,
    pub classify_ms: f64,
    pub feedback_ms: f64,
    pub total_ms: f64,
}

impl Timings {
    pub fn stage_sum(&self) -> f64 {
        self.decode_ms + self.detect_ms + self.reflex_ms + self.properties_ms + self.classify_ms + self.feedback_ms
    }
}

struct Laps {
    start: Instant,
    last: Instant,
}

impl Laps {
    fn new() -> Self {
        let now = Instant::now();
        Self { start: now, last: now }
    }

    fn lap(&mut self) -> f64 {
        let now = Instant::now();
        let ms = (now - self.last).as_secs_f64() * 1e3;
        self.last = now;
        ms
    }

    fn total(&self) -> f64 {
        (self.last - self.start).as_secs_f64() * 1e3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub usable: bool,
    pub verdict: ScreenVerdict,
    /// Present exactly when the capture is usable.
    pub label: Option<Label>,
    /// `[p_normal, p_abnormal]`, present when usable.
    pub probabilities: Option<[f64; 2]>,
    pub confidence: Option<f64>,
    pub feedback: Vec<FeedbackItem>,
    /// Properties of the full eye image that feedback is judged on.
    pub properties: Option<PropertyVector>,
    pub timings: Timings,
    pub model_version: String,
}

#[derive(Debug)]
pub enum ScreenError {
    /// The body is not a decodable PNG or JPEG.
    Undecodable(String),
    /// Anything else; a server-side failure.
    Internal(String),
}

impl fmt::Display for ScreenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScreenError::Undecodable(m) => write!(f, "undecodable image: {m}"),
            ScreenError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for ScreenError {}

impl From<Error> for ScreenError {
    fn from(e: Error) -> Self {
        match e {
            Error::Decode(m) => ScreenError::Undecodable(m),
            other => ScreenError::Internal(other.to_string()),
        }
    }
}

/// An immutable, loaded bundle plus everything needed to run it.
pub struct Screener {
    pub bundle: ModelBundle,
    pub version: String,
    pub providers: Providers,
    pub detector: Arc<dyn Detector>,
}

impl Screener {
    pub fn new(bundle: ModelBundle, version: String, providers: Providers, detector: Arc<dyn Detector>) -> redreflex::Result<Self> {
        bundle.model.check_providers(&providers)?;
        Ok(Self {
            bundle,
            version,
            providers,
            detector,
        })
    }

    /// Screens one image. Deterministic for a given bundle, image and eye choice.
    pub fn screen(&self, bytes: &[u8], eye: EyeChoice) -> Result<ScreeningResult, ScreenError> {
        let mut laps = Laps::new();
        let mut timings = Timings::default();
        let image = RgbImage::decode(bytes)?;
        timings.decode_ms = laps.lap();

        let eye_image = match eye {
            EyeChoice::Right => Some(image),
            EyeChoice::Left => Some(image.flip_horizontal()),
            EyeChoice::Auto => match self.detector.detect_eyes(&image)?.first() {
                Some(b) => Some(b.crop(&image)?),
                None => None,
            },
        };
        timings.detect_ms = laps.lap();

        let analysis = match &eye_image {
            Some(e) => analyze_eye("upload", e, self.detector.as_ref(), &self.bundle.gate)?,
            None => None,
        };
        timings.reflex_ms = laps.lap();

        let (Some(eye_image), Some(analysis)) = (eye_image, analysis) else {
            timings.feedback_ms = laps.lap();
            timings.total_ms = laps.total();
            return Ok(ScreeningResult {
                usable: false,
                verdict: ScreenVerdict::NoEye,
                label: None,
                probabilities: None,
                confidence: None,
                feedback: vec![no_eye_feedback()],
                properties: None,
                timings,
                model_version: self.version.clone(),
            });
        };

        let properties = compute_properties(&eye_image, None)?;
        timings.properties_ms = laps.lap();

        let verdict = analysis.verdict();
        let probabilities = if verdict.is_usable() {
            Some(self.bundle.model.predict(&self.providers, &analysis.crop.image)?)
        } else {
            None
        };
        timings.classify_ms = laps.lap();

        let feedback = match probabilities {
            Some(p) => generate_feedback(&self.bundle.feedback_rules, &properties, confidence(p), &self.bundle.feedback),
            None => verdict_feedback(verdict).into_iter().collect(),
        };
        timings.feedback_ms = laps.lap();
        timings.total_ms = laps.total();

        Ok(ScreeningResult {
            usable: verdict.is_usable(),
            verdict: verdict.into(),
            label: probabilities.map(decide),
            probabilities,
            confidence: probabilities.map(confidence),
            feedback,
            properties: Some(properties),
            timings,
            model_version: self.version.clone(),
        })
    }
}

//! Capture-quality feedback learned from how property distributions differ
//! between confident and unconfident predictions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ks_two_sample, PropertyVector, SIGNIFICANCE_LEVEL};
use crate::pipeline::Verdict;
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsConfident,
    LowerIsConfident,
}

/// The properties feedback is derived from, each with its fixed direction.
pub const FEEDBACK_PROPERTIES: [(&str, Direction); 4] = [
    ("contrast", Direction::HigherIsConfident),
    ("brightness", Direction::LowerIsConfident),
    ("redness", Direction::LowerIsConfident),
    ("intensity_ratio", Direction::HigherIsConfident),
];

fn suggestion(property: &str) -> &'static str {
    match property {
        "contrast" => "increase contrast: dim the room so the pupil stands out against the flash",
        "brightness" => "image too bright: reduce ambient light and avoid windows behind the camera",
        "redness" => "reduce ambient red light / use a darker background",
        "intensity_ratio" => "reflex too faint: use the flash in a dim room and hold the camera at eye level",
        _ => GENERIC_SUGGESTION,
    }
}

pub const GENERIC_SUGGESTION: &str = "retake with darker background";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRule {
    pub property: String,
    pub direction: Direction,
    pub threshold: f64,
    pub ks_statistic: f64,
    pub p_value: f64,
}

impl FeedbackRule {
    /// True when `value` lies on the unconfident side of the threshold.
    pub fn violated_by(&self, value: f64) -> bool {
        match self.direction {
            Direction::HigherIsConfident => value < self.threshold,
            Direction::LowerIsConfident => value > self.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    /// Predictions at or above this confidence get no feedback.
    pub confidence_threshold: f64,
    pub significance: f64,
    /// Quantile of the confident group used for higher-is-confident rules.
    pub higher_quantile: f64,
    /// Quantile of the confident group used for lower-is-confident rules.
    pub lower_quantile: f64,
    pub min_samples: usize,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.8,
            significance: SIGNIFICANCE_LEVEL,
            higher_quantile: 0.25,
            lower_quantile: 0.75,
            min_samples: 20,
        }
    }
}

/// Splits at the median confidence (ties broken by index) into
/// `(not_confident, confident)` index sets; an odd middle element goes to
/// the confident half.
pub fn median_split(confidences: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));
    let confident = order.split_off(confidences.len() / 2);
    (order, confident)
}

/// Fits one rule per feedback property whose distribution differs
/// significantly between the confident and unconfident halves. Properties
/// must be computed on the full-eye images behind `confidences`.
pub fn fit_feedback_rules(confidences: &[f64], properties: &[PropertyVector], cfg: &FeedbackConfig) -> Result<Vec<FeedbackRule>> {
    if confidences.len() != properties.len() {
        return Err(Error::arg("confidences and properties differ in length"));
    }
    if confidences.len() < cfg.min_samples {
        return Err(Error::InsufficientData {
            needed: cfg.min_samples,
            got: confidences.len(),
        });
    }
    let (low, high) = median_split(confidences);
    let mut rules = Vec::new();
    for (name, direction) in FEEDBACK_PROPERTIES {
        let value = |i: &usize| properties[*i].get(name).expect("feedback property exists");
        let unconfident: Vec<f64> = low.iter().map(value).collect();
        let confident: Vec<f64> = high.iter().map(value).collect();
        let ks = ks_two_sample(&confident, &unconfident)?;
        if ks.p_value >= cfg.significance {
            continue;
        }
        let q = match direction {
            Direction::HigherIsConfident => cfg.higher_quantile,
            Direction::LowerIsConfident => cfg.lower_quantile,
        };
        rules.push(FeedbackRule {
            property: name.to_string(),
            direction,
            threshold: stats::quantile(&confident, q),
            ks_statistic: ks.statistic,
            p_value: ks.p_value,
        });
    }
    Ok(rules)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackItem {
    /// Property name, capture verdict, or `generic`.
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl fmt::Display for FeedbackItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.value, self.threshold) {
            (Some(v), Some(t)) => write!(f, "{}: {} (measured {v:.4}, threshold {t:.4})", self.code, self.message),
            _ => write!(f, "{}: {}", self.code, self.message),
        }
    }
}

/// Feedback for a usable capture. Confident predictions get none; otherwise
/// one item per violated rule, or a generic retake item if none is violated.
pub fn generate_feedback(rules: &[FeedbackRule], properties: &PropertyVector, confidence: f64, cfg: &FeedbackConfig) -> Vec<FeedbackItem> {
    if confidence >= cfg.confidence_threshold {
        return Vec::new();
    }
    let mut items: Vec<FeedbackItem> = rules
        .iter()
        .filter_map(|r| {
            let v = properties.get(&r.property)?;
            r.violated_by(v).then(|| FeedbackItem {
                code: r.property.clone(),
                message: suggestion(&r.property).to_string(),
                value: Some(v),
                threshold: Some(r.threshold),
            })
        })
        .collect();
    if items.is_empty() {
        items.push(FeedbackItem {
            code: "generic".into(),
            message: GENERIC_SUGGESTION.into(),
            value: None,
            threshold: None,
        });
    }
    items
}

/// Retake guidance for a capture that failed the usability gate.
pub fn verdict_feedback(verdict: Verdict) -> Option<FeedbackItem> {
    let message = match verdict {
        Verdict::Usable => return None,
        Verdict::TooBig => "reflex too large or hazy: move the camera a little further away and retake",
        Verdict::TooSmall => "reflex too small: move closer and make sure the flash fires",
        Verdict::TooElongated => "reflex smeared: hold the camera steady and retake",
        Verdict::NoReflex => "no reflex visible: turn the flash on, have the child look at the camera, and retake",
    };
    Some(FeedbackItem {
        code: verdict.as_str().into(),
        message: message.into(),
        value: None,
        threshold: None,
    })
}

/// Retake guidance when no eye was found at all.
pub fn no_eye_feedback() -> FeedbackItem {
    FeedbackItem {
        code: "no_eye".into(),
        message: "no eye found: centre the child's face in the frame and retake".into(),
        value: None,
        threshold: None,
    }
}

//! HTTP client for a cloud face-landmark service, plus a fallback wrapper.
//!
//! The wire format follows the common `images:annotate` shape: a base64 PNG in,
//! face annotations with named landmarks out. Eye boxes are squares centred on
//! the `LEFT_EYE` / `RIGHT_EYE` landmarks.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::detector::{Detector, EyeBox, FallbackDetector, PupilEstimate};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const ENDPOINT_VAR: &str = "VISION_ENDPOINT";
pub const API_KEY_VAR: &str = "VISION_API_KEY";

/// Eye box side as a fraction of the inter-ocular distance.
const EYE_BOX_FRACTION: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub pool_size: usize,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            timeout: Duration::from_secs(10),
            pool_size: 4,
        }
    }

    /// Reads `VISION_ENDPOINT` and `VISION_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let get = |k: &str| std::env::var(k).map_err(|_| Error::config(format!("environment variable {k} is not set")));
        Ok(Self::new(get(ENDPOINT_VAR)?, get(API_KEY_VAR)?))
    }
}

#[derive(Debug, Deserialize)]
struct AnnotateResponse {
    #[serde(default)]
    responses: Vec<ImageResponse>,
}

#[derive(Debug, Deserialize)]
struct ImageResponse {
    #[serde(default, rename = "faceAnnotations")]
    face_annotations: Vec<FaceAnnotation>,
    #[serde(default)]
    error: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct FaceAnnotation {
    #[serde(default)]
    landmarks: Vec<Landmark>,
}

#[derive(Debug, Deserialize)]
struct Landmark {
    #[serde(rename = "type")]
    kind: String,
    position: Position,
}

#[derive(Debug, Deserialize)]
struct Position {
    #[serde(default)]
    x: f64,
    #[serde(default)]
    y: f64,
}

/// Converts an annotate response body into eye boxes for an image of the given size.
pub fn parse_eye_boxes(body: &str, width: usize, height: usize) -> Result<Vec<EyeBox>> {
    let resp: AnnotateResponse = serde_json::from_str(body)?;
    let mut boxes = Vec::new();
    for r in &resp.responses {
        if let Some(err) = &r.error {
            return Err(Error::Remote {
                message: format!("service reported error: {err}"),
                retry_after: None,
            });
        }
        for face in &r.face_annotations {
            let find = |k: &str| face.landmarks.iter().find(|l| l.kind == k).map(|l| (l.position.x, l.position.y));
            let eyes: Vec<(f64, f64)> = ["LEFT_EYE", "RIGHT_EYE"].iter().filter_map(|k| find(k)).collect();
            let side = match eyes.as_slice() {
                [a, b] => ((a.0 - b.0).hypot(a.1 - b.1) * EYE_BOX_FRACTION).max(2.0),
                [_] => width.min(height) as f64 * 0.25,
                _ => continue,
            };
            for (cx, cy) in eyes {
                if let Some(b) = square_box(cx, cy, side, width, height) {
                    boxes.push(b);
                }
            }
        }
    }
    boxes.sort_by(|a, b| a.center_x().total_cmp(&b.center_x()));
    Ok(boxes)
}

fn square_box(cx: f64, cy: f64, side: f64, width: usize, height: usize) -> Option<EyeBox> {
    let side = (side.round() as usize).min(width).min(height);
    if side == 0 {
        return None;
    }
    let start = |c: f64, extent: usize| (c - side as f64 / 2.0).round().clamp(0.0, (extent - side) as f64) as usize;
    Some(EyeBox {
        x: start(cx, width),
        y: start(cy, height),
        width: side,
        height: side,
    })
}

/// Face-landmark client. The underlying connection pool is shared by all callers.
pub struct RemoteDetector {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    pupils: FallbackDetector,
}

impl RemoteDetector {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .pool_max_idle_per_host(config.pool_size)
            .build()
            .map_err(|e| Error::config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            config,
            client,
            pupils: FallbackDetector,
        })
    }

    pub fn request_body(image: &RgbImage) -> serde_json::Value {
        let content = base64::engine::general_purpose::STANDARD.encode(image.encode_png());
        json!({
            "requests": [{
                "image": { "content": content },
                "features": [{ "type": "FACE_DETECTION", "maxResults": 10 }]
            }]
        })
    }
}

impl Detector for RemoteDetector {
    fn name(&self) -> &str {
        "remote"
    }

    fn detect_eyes(&self, image: &RgbImage) -> Result<Vec<EyeBox>> {
        let resp = self
            .client
            .post(&self.config.endpoint)
            .query(&[("key", &self.config.api_key)])
            .json(&Self::request_body(image))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    Error::Timeout(self.config.timeout)
                } else {
                    Error::Remote {
                        message: e.to_string(),
                        retry_after: None,
                    }
                }
            })?;
        let status = resp.status();
        if !status.is_success() {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(Error::Remote {
                message: format!("service answered HTTP {status}"),
                retry_after,
            });
        }
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                Error::Timeout(self.config.timeout)
            } else {
                Error::Remote {
                    message: e.to_string(),
                    retry_after: None,
                }
            }
        })?;
        parse_eye_boxes(&body, image.width(), image.height())
    }

    fn detect_pupil(&self, eye: &RgbImage) -> Option<PupilEstimate> {
        self.pupils.detect_pupil(eye)
    }
}

/// Uses `primary` for eye detection and drops to `fallback` when the primary
/// reports a remote or timeout failure.
pub struct WithFallback<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: Detector, F: Detector> Detector for WithFallback<P, F> {
    fn name(&self) -> &str {
        self.primary.name()
    }

    fn detect_eyes(&self, image: &RgbImage) -> Result<Vec<EyeBox>> {
        match self.primary.detect_eyes(image) {
            Err(e @ (Error::Remote { .. } | Error::Timeout(_))) => {
                log::warn!("eye detection via {} failed ({e}); using {}", self.primary.name(), self.fallback.name());
                self.fallback.detect_eyes(image)
            }
            other => other,
        }
    }

    fn detect_pupil(&self, eye: &RgbImage) -> Option<PupilEstimate> {
        self.primary.detect_pupil(eye)
    }
}

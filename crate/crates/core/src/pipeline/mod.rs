//! Eye and pupil localisation, reflex detection, and the usability gate.

mod crop;
mod detector;
mod reflex;
mod remote;

pub use crop::{crop_pupil, crop_side, CropPlacement, PupilCrop, CROP_MARGIN, CROP_SIZE};
pub use detector::{detect_pupil_fallback, Detector, EyeBox, FallbackDetector, PupilEstimate};
pub use reflex::{
    detect_reflexes, select_and_gate, select_and_gate_at, whiteness_map, GateConfig, ReflexComponent, ReflexReport,
    Verdict, WhitenessMap,
};
pub use remote::{parse_eye_boxes, RemoteConfig, RemoteDetector, WithFallback, API_KEY_VAR, ENDPOINT_VAR};

use crate::error::Result;
use crate::raster::RgbImage;

/// Result of running the pupil stages on one eye image.
#[derive(Clone, Debug, PartialEq)]
pub struct PupilAnalysis {
    pub crop: PupilCrop,
    pub report: ReflexReport,
}

impl PupilAnalysis {
    pub fn verdict(&self) -> Verdict {
        self.report.verdict.expect("analysis reports are always gated")
    }

    /// Selected reflex centroid mapped back into eye-image coordinates.
    pub fn reflex_centroid_in_eye(&self) -> Option<(f64, f64)> {
        self.report
            .selected_component()
            .map(|c| self.crop.placement.to_source(c.centroid))
    }
}

/// Pupil detection, crop, whiteness map, hysteresis and gating for one eye
/// image. Returns `Ok(None)` when no pupil is found.
pub fn analyze_eye(
    id: &str,
    eye: &RgbImage,
    detector: &dyn Detector,
    gate: &GateConfig,
) -> Result<Option<PupilAnalysis>> {
    let Some(pupil) = detector.detect_pupil(eye) else {
        return Ok(None);
    };
    let crop = crop_pupil(id, eye, pupil.center, pupil.radius)?;
    let report = select_and_gate(&detect_reflexes(&whiteness_map(&crop)), &crop, gate);
    Ok(Some(PupilAnalysis { crop, report }))
}

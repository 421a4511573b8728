use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

/// Side length of stored pupil crops.
pub const CROP_SIZE: usize = 128;
/// Extra border around the pupil diameter, as a fraction of the diameter.
pub const CROP_MARGIN: f64 = 0.15;

/// Square, resampled pupil image with its pupil disk in crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PupilCrop {
    pub source_id: String,
    pub image: RgbImage,
    pub pupil_center: (f64, f64),
    pub pupil_radius: f64,
    /// Placement of the crop in the source eye image.
    pub placement: CropPlacement,
}

/// Where a crop came from: top-left corner and side length before resampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropPlacement {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
    pub size: usize,
}

impl CropPlacement {
    /// Maps a source-image point into crop coordinates (pixel-centre convention).
    pub fn to_crop(&self, p: (f64, f64)) -> (f64, f64) {
        let s = self.size as f64 / self.side as f64;
        ((p.0 - self.x0 as f64 + 0.5) * s - 0.5, (p.1 - self.y0 as f64 + 0.5) * s - 0.5)
    }

    /// Inverse of [`CropPlacement::to_crop`].
    pub fn to_source(&self, p: (f64, f64)) -> (f64, f64) {
        let s = self.side as f64 / self.size as f64;
        ((p.0 + 0.5) * s - 0.5 + self.x0 as f64, (p.1 + 0.5) * s - 0.5 + self.y0 as f64)
    }

    pub fn scale(&self) -> f64 {
        self.size as f64 / self.side as f64
    }
}

impl PupilCrop {
    /// Wraps an already-standardised crop whose pupil is assumed centred and
    /// spanning the crop minus the standard margin.
    pub fn from_standard_image(source_id: impl Into<String>, image: RgbImage) -> Self {
        let size = image.width();
        let radius = size as f64 / (2.0 * (1.0 + CROP_MARGIN));
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            source_id: source_id.into(),
            pupil_center: (c, c),
            pupil_radius: radius,
            placement: CropPlacement {
                x0: 0,
                y0: 0,
                side: size,
                size,
            },
            image,
        }
    }

    pub fn pupil_mask(&self) -> Mask {
        Mask::disk(
            self.image.width(),
            self.image.height(),
            self.pupil_center.0,
            self.pupil_center.1,
            self.pupil_radius,
        )
    }

    pub fn pupil_area(&self) -> f64 {
        std::f64::consts::PI * self.pupil_radius * self.pupil_radius
    }
}

/// Side of the square window before resampling: `floor(2 r (1 + margin))`, rounded up to even.
pub fn crop_side(radius: f64, margin: f64) -> usize {
    let side = (2.0 * radius * (1.0 + margin)).floor() as usize;
    side + side % 2
}

/// Cuts a square window around the pupil, shifts it inside the image when it
/// would cross a border, and resamples it to [`CROP_SIZE`].
pub fn crop_pupil(source_id: &str, eye: &RgbImage, center: (f64, f64), radius: f64) -> Result<PupilCrop> {
    if !(radius > 1.0) {
        return Err(Error::Pipeline(format!("degenerate pupil radius {radius}")));
    }
    let (w, h) = (eye.width(), eye.height());
    let (cx, cy) = center;
    if cx + radius < 0.0 || cy + radius < 0.0 || cx - radius > w as f64 || cy - radius > h as f64 {
        return Err(Error::Pipeline("pupil disk lies outside the eye image".into()));
    }
    let side = crop_side(radius, CROP_MARGIN).min(w).min(h);
    let place = |c: f64, extent: usize| -> usize {
        let start = (c - side as f64 / 2.0 + 0.5).round();
        start.clamp(0.0, (extent - side) as f64) as usize
    };
    let placement = CropPlacement {
        x0: place(cx, w),
        y0: place(cy, h),
        side,
        size: CROP_SIZE,
    };
    let window = eye.crop(placement.x0, placement.y0, side, side)?;
    Ok(PupilCrop {
        source_id: source_id.to_string(),
        image: window.resize(CROP_SIZE, CROP_SIZE),
        pupil_center: placement.to_crop(center),
        pupil_radius: radius * placement.scale(),
        placement,
    })
}

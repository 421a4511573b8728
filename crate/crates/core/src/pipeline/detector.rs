use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::to_grayscale;
use crate::raster::RgbImage;
use crate::regions;
use crate::stats;

/// Axis-aligned eye box in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl EyeBox {
    pub fn crop(&self, image: &RgbImage) -> Result<RgbImage> {
        image.crop(self.x, self.y, self.width, self.height)
    }

    pub fn center_x(&self) -> f64 {
        self.x as f64 + self.width as f64 / 2.0
    }
}

/// Pupil disk estimate in eye-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PupilEstimate {
    pub center: (f64, f64),
    pub radius: f64,
}

/// Eye and pupil localisation. Implementations must tolerate concurrent calls.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// Eye boxes inside `image`, ordered left to right.
    fn detect_eyes(&self, image: &RgbImage) -> Result<Vec<EyeBox>>;

    /// Pupil disk inside an eye crop, if one is found.
    fn detect_pupil(&self, eye: &RgbImage) -> Option<PupilEstimate>;
}

const DARK_QUANTILE: f64 = 0.2;
const MIN_AREA_FRACTION: f64 = 0.01;

/// Local detector that needs no network access.
///
/// The pupil is the largest 8-connected region strictly below the 20th-percentile
/// gray level, with interior holes (the flash reflex) filled. It is rejected
/// when it covers less than 1% of the image. Images handed to `detect_eyes`
/// are assumed to already be single-eye crops.
#[derive(Clone, Copy, Debug, Default)]
pub struct FallbackDetector;

impl Detector for FallbackDetector {
    fn name(&self) -> &str {
        "fallback"
    }

    fn detect_eyes(&self, image: &RgbImage) -> Result<Vec<EyeBox>> {
        Ok(match self.detect_pupil(image) {
            Some(_) => vec![EyeBox {
                x: 0,
                y: 0,
                width: image.width(),
                height: image.height(),
            }],
            None => Vec::new(),
        })
    }

    fn detect_pupil(&self, eye: &RgbImage) -> Option<PupilEstimate> {
        detect_pupil_fallback(eye)
    }
}

pub fn detect_pupil_fallback(eye: &RgbImage) -> Option<PupilEstimate> {
    let gray = to_grayscale(eye);
    let (w, h) = (gray.width, gray.height);
    let threshold = stats::quantile(&gray.values, DARK_QUANTILE);
    let dark: Vec<bool> = gray.values.iter().map(|&v| v < threshold).collect();
    let largest = regions::components(w, h, &dark).into_iter().max_by_key(|r| r.area())?;

    let mut filled = vec![false; w * h];
    for &p in &largest.pixels {
        filled[p] = true;
    }
    fill_holes(w, h, &mut filled);
    let region = regions::Region {
        pixels: (0..w * h).filter(|&p| filled[p]).collect(),
    };
    if (region.area() as f64) < MIN_AREA_FRACTION * (w * h) as f64 {
        return None;
    }
    Some(PupilEstimate {
        center: region.centroid(w),
        radius: (region.area() as f64 / std::f64::consts::PI).sqrt(),
    })
}

/// Marks every background pixel that is not 4-connected to the border as foreground.
fn fill_holes(w: usize, h: usize, fg: &mut [bool]) {
    let mut outside = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    for x in 0..w {
        stack.push(x);
        stack.push((h - 1) * w + x);
    }
    for y in 0..h {
        stack.push(y * w);
        stack.push(y * w + w - 1);
    }
    while let Some(p) = stack.pop() {
        if fg[p] || outside[p] {
            continue;
        }
        outside[p] = true;
        let (x, y) = (p % w, p / w);
        if x > 0 {
            stack.push(p - 1);
        }
        if x + 1 < w {
            stack.push(p + 1);
        }
        if y > 0 {
            stack.push(p - w);
        }
        if y + 1 < h {
            stack.push(p + w);
        }
    }
    for p in 0..w * h {
        if !outside[p] {
            fg[p] = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disks(size: usize, disks: &[(f64, f64, f64)]) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            let inside = disks.iter().any(|&(cx, cy, r)| {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                dx * dx + dy * dy <= r * r
            });
            if inside {
                [20, 20, 20]
            } else {
                [220, 210, 200]
            }
        })
    }

    #[test]
    fn finds_single_disk() {
        let p = detect_pupil_fallback(&disks(200, &[(100.0, 100.0, 40.0)])).unwrap();
        assert!((p.center.0 - 100.0).abs() < 2.0 && (p.center.1 - 100.0).abs() < 2.0);
        assert!((p.radius - 40.0).abs() < 4.0);
    }

    #[test]
    fn white_image_has_no_pupil() {
        assert!(detect_pupil_fallback(&RgbImage::filled(64, 64, [255, 255, 255])).is_none());
        assert!(FallbackDetector.detect_eyes(&RgbImage::filled(64, 64, [255, 255, 255])).unwrap().is_empty());
    }

    #[test]
    fn largest_disk_wins() {
        let p = detect_pupil_fallback(&disks(300, &[(90.0, 150.0, 40.0), (230.0, 60.0, 10.0)])).unwrap();
        assert!((p.center.0 - 90.0).abs() < 2.0 && (p.center.1 - 150.0).abs() < 2.0);
        assert!((p.radius - 40.0).abs() < 4.0);
    }

    #[test]
    fn reflex_hole_is_filled() {
        let mut img = disks(200, &[(100.0, 100.0, 40.0)]);
        for y in 95..106 {
            for x in 95..106 {
                img.put(x, y, [255, 255, 255]);
            }
        }
        let p = detect_pupil_fallback(&img).unwrap();
        assert!((p.radius - 40.0).abs() < 1.0);
    }

    #[test]
    fn tiny_region_rejected() {
        assert!(detect_pupil_fallback(&disks(200, &[(100.0, 100.0, 5.0)])).is_none());
    }
}

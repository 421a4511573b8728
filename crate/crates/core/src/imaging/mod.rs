//! Raster descriptors and distribution tests used to compare image populations.

mod ks;
mod properties;
mod report;

pub use ks::{kolmogorov_survival, ks_statistic, ks_two_sample, KsResult};
pub use properties::{
    compute_batch, compute_properties, fourier_energy, glcm_homogeneity, laplacian, lbp_mean, shannon_entropy,
    PropertyVector, SCALAR_PROPERTIES,
};
pub use report::{property_class_report, PropertyComparison, PropertyReport, SIGNIFICANCE_LEVEL};

use crate::raster::{GrayImage, RgbImage};

/// Rec.601 luma. Channel-equal pixels map to exactly their common value.
pub fn to_grayscale(image: &RgbImage) -> GrayImage {
    let values = image
        .pixels()
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect();
    GrayImage {
        width: image.width(),
        height: image.height(),
        values,
    }
}

#[inline]
pub(crate) fn luma(r: u8, g: u8, b: u8) -> f64 {
    if r == g && g == b {
        return r as f64;
    }
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

//! Distance of embedded points to a centroid-bisector decision boundary.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub normal_centroid: [f64; 2],
    pub abnormal_centroid: [f64; 2],
    /// Positive on the abnormal side of the bisector.
    pub signed_distances: Vec<f64>,
    pub median_abs_correct: Option<f64>,
    pub median_abs_incorrect: Option<f64>,
    /// Points lying on the side of the other class's centroid.
    pub wrong_side: usize,
}

/// Signed distance of every point to the perpendicular bisector of the two
/// class centroids, with medians of `|distance|` for correctly and
/// incorrectly classified points.
pub fn boundary_distance_report(coords: &[[f64; 2]], labels: &[Label], correct: &[bool]) -> Result<BoundaryReport> {
    if coords.len() != labels.len() || coords.len() != correct.len() {
        return Err(Error::arg("coordinates, labels and correctness differ in length"));
    }
    let centroid = |class: Label| -> Option<[f64; 2]> {
        let pts: Vec<&[f64; 2]> = coords.iter().zip(labels).filter(|(_, l)| **l == class).map(|(c, _)| c).collect();
        (!pts.is_empty()).then(|| {
            let n = pts.len() as f64;
            let s = pts.iter().fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]);
            [s[0] / n, s[1] / n]
        })
    };
    let (Some(cn), Some(ca)) = (centroid(Label::Normal), centroid(Label::Abnormal)) else {
        return Err(Error::arg("boundary report needs both classes"));
    };
    let axis = [ca[0] - cn[0], ca[1] - cn[1]];
    let len = axis[0].hypot(axis[1]);
    if len == 0.0 {
        return Err(Error::arg("class centroids coincide"));
    }
    let unit = [axis[0] / len, axis[1] / len];
    let mid = [(ca[0] + cn[0]) / 2.0, (ca[1] + cn[1]) / 2.0];
    let signed: Vec<f64> = coords
        .iter()
        .map(|p| (p[0] - mid[0]) * unit[0] + (p[1] - mid[1]) * unit[1])
        .collect();
    let wrong_side = signed
        .iter()
        .zip(labels)
        .filter(|(d, l)| match l {
            Label::Abnormal => **d < 0.0,
            Label::Normal => **d > 0.0,
            Label::Unlabeled => false,
        })
        .count();
    let median_abs = |want: bool| {
        let v: Vec<f64> = signed.iter().zip(correct).filter(|(_, c)| **c == want).map(|(d, _)| d.abs()).collect();
        (!v.is_empty()).then(|| stats::median(&v))
    };
    Ok(BoundaryReport {
        normal_centroid: cn,
        abnormal_centroid: ca,
        median_abs_correct: median_abs(true),
        median_abs_incorrect: median_abs(false),
        signed_distances: signed,
        wrong_side,
    })
}

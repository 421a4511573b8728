use serde::{Deserialize, Serialize};

use super::{ks_two_sample, KsResult, PropertyVector, SCALAR_PROPERTIES};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::stats;

/// p-value below which a property difference is flagged.
pub const SIGNIFICANCE_LEVEL: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyComparison {
    pub property: String,
    #[serde(rename = "D")]
    pub statistic: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
    pub mean_normal: f64,
    pub mean_abnormal: f64,
    pub significant: bool,
    #[serde(skip)]
    pub ks: Option<KsResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub properties: Vec<PropertyComparison>,
}

impl PropertyReport {
    pub fn get(&self, property: &str) -> Option<&PropertyComparison> {
        self.properties.iter().find(|c| c.property == property)
    }

    pub fn significant(&self) -> impl Iterator<Item = &PropertyComparison> {
        self.properties.iter().filter(|c| c.significant)
    }
}

/// KS test of every scalar property (plus image area) between normal and
/// abnormal images. Unlabeled rows are ignored.
pub fn property_class_report(rows: &[(PropertyVector, Label)]) -> Result<PropertyReport> {
    let normal: Vec<&PropertyVector> = rows.iter().filter(|(_, l)| *l == Label::Normal).map(|(p, _)| p).collect();
    let abnormal: Vec<&PropertyVector> = rows.iter().filter(|(_, l)| *l == Label::Abnormal).map(|(p, _)| p).collect();
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::arg("property report needs both normal and abnormal samples"));
    }

    let mut names: Vec<&str> = SCALAR_PROPERTIES.to_vec();
    names.push("image_size");
    let properties = names
        .into_iter()
        .map(|name| {
            let column = |group: &[&PropertyVector]| -> Vec<f64> {
                group.iter().map(|p| p.get(name).expect("known property")).collect()
            };
            let (a, b) = (column(&normal), column(&abnormal));
            let ks = ks_two_sample(&a, &b)?;
            Ok(PropertyComparison {
                property: name.to_string(),
                statistic: ks.statistic,
                p_value: ks.p_value,
                mean_normal: stats::mean(&a),
                mean_abnormal: stats::mean(&b),
                significant: ks.p_value < SIGNIFICANCE_LEVEL,
                ks: Some(ks),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PropertyReport {
        n_normal: normal.len(),
        n_abnormal: abnormal.len(),
        properties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::compute_properties;
    use crate::raster::RgbImage;

    fn img(seed: u32, extra_red: u8) -> RgbImage {
        RgbImage::from_fn(8, 8, |x, y| {
            let v = ((x as u32 * 31 + y as u32 * 17 + seed * 13) % 97) as u8 + 40;
            [v.saturating_add(extra_red), v, v / 2]
        })
    }

    #[test]
    fn single_class_rejected() {
        let p = compute_properties(&img(0, 0), None).unwrap();
        assert!(property_class_report(&[(p.clone(), Label::Normal), (p, Label::Normal)]).is_err());
    }

    #[test]
    fn swapped_labels_keep_statistics() {
        let rows: Vec<_> = (0..30)
            .map(|i| {
                let label = if i % 3 == 0 { Label::Abnormal } else { Label::Normal };
                (compute_properties(&img(i, if i % 3 == 0 { 20 } else { 0 }), None).unwrap(), label)
            })
            .collect();
        let swapped: Vec<_> = rows
            .iter()
            .map(|(p, l)| {
                let l = if *l == Label::Normal { Label::Abnormal } else { Label::Normal };
                (p.clone(), l)
            })
            .collect();
        let a = property_class_report(&rows).unwrap();
        let b = property_class_report(&swapped).unwrap();
        assert_eq!(a.properties.len(), 12);
        for (x, y) in a.properties.iter().zip(&b.properties) {
            assert_eq!(x.statistic, y.statistic);
            assert_eq!(x.mean_normal, y.mean_abnormal);
        }
    }
}

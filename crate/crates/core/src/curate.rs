//! Dataset curation: runs the pupil stages over eye records and keeps the
//! usable crops for training and evaluation.

use serde::Serialize;

use crate::classifier::LabeledImage;
use crate::dataset::{EyeRecord, Label, Side, Split};
use crate::error::Result;
use crate::par::{self, Exec};
use crate::pipeline::{analyze_eye, Detector, GateConfig, PupilAnalysis, Verdict};

/// Pipeline outcome for one eye record.
#[derive(Clone, Debug, PartialEq)]
pub struct CuratedEye {
    pub id: String,
    pub subject_id: String,
    pub side: Side,
    pub label: Label,
    pub split: Split,
    /// `None` when no pupil was found.
    pub analysis: Option<PupilAnalysis>,
}

impl CuratedEye {
    pub fn verdict(&self) -> Option<Verdict> {
        self.analysis.as_ref().map(PupilAnalysis::verdict)
    }

    pub fn is_usable(&self) -> bool {
        self.verdict().is_some_and(Verdict::is_usable)
    }
}

/// Analyses every record (already mirrored as required). Output order follows input order.
pub fn curate(records: &[EyeRecord], detector: &dyn Detector, gate: &GateConfig, exec: Exec) -> Result<Vec<CuratedEye>> {
    par::try_map(exec, records, |r| {
        Ok(CuratedEye {
            id: r.id.clone(),
            subject_id: r.subject_id.clone(),
            side: r.side,
            label: r.label,
            split: r.split,
            analysis: analyze_eye(&r.id, &r.image, detector, gate)?,
        })
    })
}

/// Usable crops of one split, with their labels.
pub fn usable_crops(curated: &[CuratedEye], split: Split) -> Vec<LabeledImage> {
    curated
        .iter()
        .filter(|c| c.split == split && c.is_usable())
        .map(|c| LabeledImage {
            id: c.id.clone(),
            image: c.analysis.as_ref().expect("usable implies analysed").crop.image.clone(),
            label: c.label,
        })
        .collect()
}

/// Counts of verdicts per split, for curation reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CurationSummary {
    pub total: usize,
    pub usable: usize,
    pub no_pupil: usize,
    pub by_verdict: std::collections::BTreeMap<String, usize>,
}

pub fn curation_summary(curated: &[CuratedEye]) -> CurationSummary {
    let mut s = CurationSummary {
        total: curated.len(),
        ..Default::default()
    };
    for c in curated {
        match c.verdict() {
            Some(v) => {
                s.usable += v.is_usable() as usize;
                *s.by_verdict.entry(v.as_str().to_string()).or_default() += 1;
            }
            None => s.no_pupil += 1,
        }
    }
    s
}

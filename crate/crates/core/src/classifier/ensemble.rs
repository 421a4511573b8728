//! Single models, probability-averaging ensembles, evaluation and seed sweeps.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::head::{confidence, HeadModel};
use super::metrics::{eval_report, EvalReport, Prediction};
use super::provider::{embed_image, Providers};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::raster::RgbImage;

/// Two or more heads whose softmax outputs are averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<HeadModel>,
}

impl Ensemble {
    pub fn new(members: Vec<HeadModel>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::config(format!("an ensemble needs at least 2 members, got {}", members.len())));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[HeadModel] {
        &self.members
    }
}

/// What a bundle holds: one head or an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Single(HeadModel),
    Ensemble(Ensemble),
}

impl Model {
    pub fn members(&self) -> &[HeadModel] {
        match self {
            Model::Single(h) => std::slice::from_ref(h),
            Model::Ensemble(e) => e.members(),
        }
    }

    /// Checks that every member's provider exists and has the member's input width.
    pub fn check_providers(&self, providers: &Providers) -> Result<()> {
        for m in self.members() {
            let p = providers.get(&m.provider)?;
            if p.dim() != m.d {
                return Err(Error::config(format!(
                    "provider `{}` yields {} features but the head expects {}",
                    m.provider,
                    p.dim(),
                    m.d
                )));
            }
        }
        Ok(())
    }

    /// Class probabilities for an image (resized to the model input here).
    /// Each distinct provider embeds the image once.
    pub fn predict(&self, providers: &Providers, image: &RgbImage) -> Result<[f64; 2]> {
        self.check_providers(providers)?;
        let mut cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut outputs = Vec::with_capacity(self.members().len());
        for m in self.members() {
            if !cache.contains_key(m.provider.as_str()) {
                let v = embed_image(providers.get(&m.provider)?, image)?;
                cache.insert(&m.provider, v);
            }
            outputs.push(m.forward(&cache[m.provider.as_str()])?.probabilities);
        }
        Ok(combine(&outputs))
    }
}

/// Arithmetic mean of member probabilities. Each component is summed in
/// ascending order so the result does not depend on member order, bit for bit.
pub fn combine(outputs: &[[f64; 2]]) -> [f64; 2] {
    let n = outputs.len() as f64;
    let mut out = [0.0; 2];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut col: Vec<f64> = outputs.iter().map(|p| p[k]).collect();
        col.sort_by(f64::total_cmp);
        *slot = col.iter().sum::<f64>() / n;
    }
    out
}

/// Averaged probabilities and the winner's confidence.
pub fn ensemble_predict(ensemble: &Ensemble, providers: &Providers, crop: &RgbImage) -> Result<([f64; 2], f64)> {
    let p = Model::Ensemble(ensemble.clone()).predict(providers, crop)?;
    Ok((p, confidence(p)))
}

/// A labelled image to score.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub image: RgbImage,
    pub label: Label,
}

/// Scores every image and computes the report. Images are scored
/// concurrently; predictions keep input order.
pub fn evaluate(model: &Model, providers: &Providers, test: &[LabeledImage], exec: Exec) -> Result<(EvalReport, Vec<Prediction>)> {
    if let Some(x) = test.iter().find(|x| x.label == Label::Unlabeled) {
        return Err(Error::Data(format!("test record {} is unlabeled", x.id)));
    }
    model.check_providers(providers)?;
    let predictions = par::try_map(exec, test, |x| {
        Ok::<_, Error>(Prediction {
            id: x.id.clone(),
            truth: x.label,
            probabilities: model.predict(providers, &x.image)?,
        })
    })?;
    Ok((eval_report(&predictions)?, predictions))
}

/// Sample mean and population standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub specificity: MetricSummary,
    pub accuracy: MetricSummary,
    pub f1: MetricSummary,
    /// Over the runs where it was defined; absent if it never was.
    pub roc_auc: Option<MetricSummary>,
}

impl SweepSummary {
    pub const HEADER: &'static str = "precision\trecall\tspecificity\taccuracy\tf1\troc_auc";

    /// One tab-separated table row.
    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.precision,
            self.recall,
            self.specificity,
            self.accuracy,
            self.f1,
            self.roc_auc.map_or("n/a".to_string(), |s| s.to_string())
        )
    }
}

pub fn summarize(seeds: &[u64], reports: &[EvalReport]) -> SweepSummary {
    let col = |f: fn(&EvalReport) -> f64| MetricSummary::of(&reports.iter().map(f).collect::<Vec<_>>());
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.roc_auc).collect();
    SweepSummary {
        seeds: seeds.to_vec(),
        precision: col(|r| r.precision),
        recall: col(|r| r.recall),
        specificity: col(|r| r.specificity),
        accuracy: col(|r| r.accuracy),
        f1: col(|r| r.f1),
        roc_auc: (!aucs.is_empty()).then(|| MetricSummary::of(&aucs)),
    }
}

/// Runs `train_and_eval` once per seed, in order, and summarises the reports.
pub fn seed_sweep(
    seeds: &[u64],
    mut train_and_eval: impl FnMut(u64) -> Result<EvalReport>,
) -> Result<(SweepSummary, Vec<EvalReport>)> {
    if seeds.len() < 2 {
        return Err(Error::arg("a seed sweep needs at least 2 seeds"));
    }
    let reports = seeds.iter().map(|&s| train_and_eval(s)).collect::<Result<Vec<_>>>()?;
    Ok((summarize(seeds, &reports), reports))
}

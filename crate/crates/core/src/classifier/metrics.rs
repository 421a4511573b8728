//! Evaluation metrics. Abnormal is the positive class throughout.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::head::{confidence, decide};
use crate::dataset::Label;
use crate::error::{Error, Result};

/// Binary confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Abnormal, Label::Abnormal) => self.tp += 1,
            (Label::Normal, Label::Abnormal) => self.fp += 1,
            (Label::Abnormal, Label::Normal) => self.fn_ += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
            _ => {}
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Sensitivity.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// `2TP / (2TP + FP + FN)`, zero when there are no positives at all.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// One scored example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub truth: Label,
    pub probabilities: [f64; 2],
}

impl Prediction {
    pub fn predicted(&self) -> Label {
        decide(self.probabilities)
    }

    pub fn confidence(&self) -> f64 {
        confidence(self.probabilities)
    }

    pub fn correct(&self) -> bool {
        self.predicted() == self.truth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Absent when the labels contain a single class.
    pub roc_auc: Option<f64>,
    pub confusion: Confusion,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.confusion;
        write!(
            f,
            "n={} accuracy={:.4} precision={:.4} recall={:.4} specificity={:.4} f1={:.4} roc_auc={} (tp={} fp={} fn={} tn={})",
            self.n,
            self.accuracy,
            self.precision,
            self.recall,
            self.specificity,
            self.f1,
            self.roc_auc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        )
    }
}

/// Area under the ROC curve via the rank-sum statistic with midranks for ties.
/// `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], truth: &[Label]) -> Option<f64> {
    let mut items: Vec<(f64, bool)> = scores
        .iter()
        .zip(truth)
        .filter(|(_, l)| **l != Label::Unlabeled)
        .map(|(&s, &l)| (s, l == Label::Abnormal))
        .collect();
    let n_pos = items.iter().filter(|(_, p)| *p).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].0 == items[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * items[i..=j].iter().filter(|(_, p)| *p).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Metrics over labelled predictions; unlabelled ones are rejected.
pub fn eval_report(predictions: &[Prediction]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Data("no predictions to evaluate".into()));
    }
    if let Some(p) = predictions.iter().find(|p| p.truth == Label::Unlabeled) {
        return Err(Error::Data(format!("prediction {} has no ground-truth label", p.id)));
    }
    let mut c = Confusion::default();
    for p in predictions {
        c.add(p.truth, p.predicted());
    }
    let scores: Vec<f64> = predictions.iter().map(|p| p.probabilities[1]).collect();
    let truth: Vec<Label> = predictions.iter().map(|p| p.truth).collect();
    Ok(EvalReport {
        n: c.total(),
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        specificity: c.specificity(),
        f1: c.f1(),
        roc_auc: roc_auc(&scores, &truth),
        confusion: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use Label::{Abnormal as A, Normal as N};

    fn pred(truth: Label, p_abn: f64) -> Prediction {
        Prediction {
            id: String::new(),
            truth,
            probabilities: [1.0 - p_abn, p_abn],
        }
    }

    #[test]
    fn counts_example() {
        let mut preds = Vec::new();
        preds.extend((0..8).map(|_| pred(A, 0.9)));
        preds.extend((0..2).map(|_| pred(N, 0.9)));
        preds.extend((0..2).map(|_| pred(A, 0.1)));
        preds.extend((0..88).map(|_| pred(N, 0.1)));
        let r = eval_report(&preds).unwrap();
        assert_eq!(r.confusion, Confusion { tp: 8, fp: 2, fn_: 2, tn: 88 });
        assert_relative_eq!(r.accuracy, 0.96);
        assert_relative_eq!(r.precision, 0.8);
        assert_relative_eq!(r.recall, 0.8);
        assert_relative_eq!(r.f1, 0.8);
        assert_relative_eq!(r.specificity, 88.0 / 90.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[N, N, A, A]), Some(0.75));
        assert_eq!(roc_auc(&[0.1, 0.9], &[N, A]), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.1], &[N, A]), Some(0.0));
        assert_eq!(roc_auc(&[0.5; 4], &[N, A, N, A]), Some(0.5));
        assert_eq!(roc_auc(&[0.2, 0.3], &[A, A]), None);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.3, 0.3, 0.7, 0.1, 0.7, 0.5, 0.3, 0.9];
        let truth = [A, N, A, N, N, A, N, A];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (sp, tp) in scores.iter().zip(&truth) {
            for (sn, tn) in scores.iter().zip(&truth) {
                if *tp == A && *tn == N {
                    pairs += 1.0;
                    wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
                }
            }
        }
        assert_relative_eq!(roc_auc(&scores, &truth).unwrap(), wins / pairs, epsilon = 1e-15);
    }

    #[test]
    fn confusion_serializes_fn_key() {
        let json = serde_json::to_string(&Confusion { tp: 1, fp: 2, fn_: 3, tn: 4 }).unwrap();
        assert_eq!(json, r#"{"tp":1,"fp":2,"fn":3,"tn":4}"#);
    }

    #[test]
    fn f1_without_positives_is_zero() {
        assert_eq!(Confusion { tn: 5, ..Default::default() }.f1(), 0.0);
    }
}

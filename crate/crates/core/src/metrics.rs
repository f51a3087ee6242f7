//! Binary classification metrics. Fake is the positive class.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::detector::FusionMode;
use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    pub y_hat: f64,
    pub y: Label,
    pub mode: FusionMode,
    /// Base detector probability, when the model has one.
    pub base_score: Option<f64>,
    /// Omission head logit in prediction fusion.
    pub omi_logit: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = Confusion::default();
        for (pred, truth) in pairs {
            match (pred, truth) {
                (Label::Fake, Label::Fake) => c.tp += 1,
                (Label::Fake, Label::Real) => c.fp += 1,
                (Label::Real, Label::Fake) => c.fn_ += 1,
                (Label::Real, Label::Real) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub f1_real: f64,
    pub f1_fake: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
}

/// F1 as `2·tp / (2·tp + fp + fn)`, zero when the class never appears in
/// either predictions or labels.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        let n = c.total();
        if n == 0 {
            return Err(Error::invalid("cannot evaluate an empty split"));
        }
        let f1_fake = f1(c.tp, c.fp, c.fn_);
        let f1_real = f1(c.tn, c.fn_, c.fp);
        Ok(MetricsReport {
            n,
            accuracy: (c.tp + c.tn) as f64 / n as f64,
            f1_real,
            f1_fake,
            macro_f1: (f1_real + f1_fake) / 2.0,
            confusion: c,
        })
    }

    pub fn csv_header() -> &'static str {
        "n,accuracy,f1_real,f1_fake,macro_f1"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.n, self.accuracy, self.f1_real, self.f1_fake, self.macro_f1
        )
    }
}

/// Metrics at the fixed 0.5 threshold.
pub fn evaluate_predictions(records: &[PredictionRecord]) -> Result<MetricsReport> {
    MetricsReport::from_confusion(Confusion::from_pairs(
        records.iter().map(|r| (Label::from_prob(r.y_hat), r.y)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(y_hat: f64, y: Label) -> PredictionRecord {
        PredictionRecord {
            item_id: String::new(),
            y_hat,
            y,
            mode: FusionMode::Prediction,
            base_score: None,
            omi_logit: None,
        }
    }

    #[test]
    fn perfect_predictions() {
        let r = evaluate_predictions(&[rec(0.9, Label::Fake), rec(0.1, Label::Real)]).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn one_of_each_cell() {
        let r = evaluate_predictions(&[
            rec(0.9, Label::Fake),
            rec(0.9, Label::Real),
            rec(0.1, Label::Fake),
            rec(0.1, Label::Real),
        ])
        .unwrap();
        assert_eq!((r.accuracy, r.f1_real, r.f1_fake, r.macro_f1), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let recs: Vec<_> = (0..10)
            .map(|i| rec(0.8, if i % 2 == 0 { Label::Fake } else { Label::Real }))
            .collect();
        let r = evaluate_predictions(&recs).unwrap();
        assert_eq!(r.f1_real, 0.0);
        assert!((r.f1_fake - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(evaluate_predictions(&[]).is_err());
    }
}

use omigraph::corpus::Label;
use omigraph::detector::FusionMode;
use omigraph::metrics::{evaluate_predictions, PredictionRecord};
use proptest::prelude::*;

/// Per-class F1 from precision and recall over the raw label lists.
fn f1_of(class: Label, pred: &[Label], truth: &[Label]) -> f64 {
    let predicted = pred.iter().filter(|&&p| p == class).count() as f64;
    let actual = truth.iter().filter(|&&t| t == class).count() as f64;
    let hits = pred.iter().zip(truth).filter(|(p, t)| **p == class && **t == class).count() as f64;
    let precision = if predicted > 0.0 { hits / predicted } else { 0.0 };
    let recall = if actual > 0.0 { hits / actual } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn records(scores: &[f64], truth: &[Label]) -> Vec<PredictionRecord> {
    scores
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (&y_hat, &y))| PredictionRecord {
            item_id: i.to_string(),
            y_hat,
            y,
            mode: FusionMode::Prediction,
            base_score: None,
            omi_logit: None,
        })
        .collect()
}

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Real), Just(Label::Fake)]
}

proptest! {
    #[test]
    fn report_agrees_with_precision_recall_oracle(
        rows in prop::collection::vec((0.0f64..=1.0, label()), 1..200)
    ) {
        let (scores, truth): (Vec<f64>, Vec<Label>) = rows.into_iter().unzip();
        let pred: Vec<Label> = scores.iter().map(|&s| if s >= 0.5 { Label::Fake } else { Label::Real }).collect();
        let r = evaluate_predictions(&records(&scores, &truth)).unwrap();
        let acc = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64;
        let fake = f1_of(Label::Fake, &pred, &truth);
        let real = f1_of(Label::Real, &pred, &truth);
        prop_assert!((r.accuracy - acc).abs() < 1e-12);
        prop_assert!((r.f1_fake - fake).abs() < 1e-12);
        prop_assert!((r.f1_real - real).abs() < 1e-12);
        prop_assert!((r.macro_f1 - (fake + real) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn threshold_is_inclusive() {
    let r = evaluate_predictions(&records(&[0.5, 0.4999], &[Label::Fake, Label::Real])).unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn empty_split_is_an_error() {
    assert!(evaluate_predictions(&[]).is_err());
}

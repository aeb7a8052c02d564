use std::io::Write;

use serde::Serialize;

use super::{Result, Sample, TrainError};
use crate::data::{Labels, CLASS_NAMES, N_CLASSES};
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InferenceMode {
    /// Both streams run; the signal head is scored.
    Signal,
    /// Image-only inference path.
    Image,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: [ClassMetrics; N_CLASSES],
    /// Unweighted means over the six classes.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores thresholded predictions (`p >= threshold` is positive) against labels.
pub fn compute_metrics(predictions: &[[f64; N_CLASSES]], labels: &[Labels], threshold: f64) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(TrainError::Contract(format!(
            "{} predictions for {} label sets",
            predictions.len(),
            labels.len()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TrainError::Contract(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut classes = [ClassMetrics::default(); N_CLASSES];
    for (p, l) in predictions.iter().zip(labels) {
        for (c, m) in classes.iter_mut().enumerate() {
            match (p[c] >= threshold, l.0[c]) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, true) => m.fn_ += 1,
                (false, false) => m.tn += 1,
            }
        }
    }
    for m in &mut classes {
        m.precision = ratio(m.tp, m.tp + m.fp);
        m.recall = ratio(m.tp, m.tp + m.fn_);
        let s = m.precision + m.recall;
        m.f1 = if s == 0.0 { 0.0 } else { 2.0 * m.precision * m.recall / s };
    }
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / N_CLASSES as f64;
    Ok(MetricsReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        classes,
    })
}

pub fn predict(state: &ModelState, samples: &[Sample], mode: InferenceMode) -> Result<Vec<[f64; N_CLASSES]>> {
    samples
        .iter()
        .map(|s| {
            Ok(match mode {
                InferenceMode::Signal => state.forward_train(&s.record, &s.image())?.0,
                InferenceMode::Image => state.forward_infer(&s.image())?,
            })
        })
        .collect()
}

pub fn evaluate(state: &ModelState, samples: &[Sample], mode: InferenceMode, threshold: f64) -> Result<MetricsReport> {
    let preds = predict(state, samples, mode)?;
    let labels: Vec<Labels> = samples.iter().map(|s| s.labels).collect();
    compute_metrics(&preds, &labels, threshold)
}

/// Six class rows then a `macro` row; the macro row sums the confusion counts.
pub fn write_metrics_csv(report: &MetricsReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "precision", "recall", "f1", "tp", "fp", "fn", "tn"])?;
    for (name, m) in CLASS_NAMES.iter().zip(&report.classes) {
        w.write_record([
            name.to_string(),
            format!("{:.6}", m.precision),
            format!("{:.6}", m.recall),
            format!("{:.6}", m.f1),
            m.tp.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
            m.tn.to_string(),
        ])?;
    }
    let sum = |f: fn(&ClassMetrics) -> usize| report.classes.iter().map(f).sum::<usize>().to_string();
    w.write_record([
        "macro".to_string(),
        format!("{:.6}", report.macro_precision),
        format!("{:.6}", report.macro_recall),
        format!("{:.6}", report.macro_f1),
        sum(|m| m.tp),
        sum(|m| m.fp),
        sum(|m| m.fn_),
        sum(|m| m.tn),
    ])?;
    w.flush()?;
    Ok(())
}

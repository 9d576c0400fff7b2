//! Class-wise rejection thresholds and open-set classification.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Numerically stable softmax of one logit vector.
pub fn softmax_probs(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// How a percentile is read off a sorted sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileRule {
    /// Element at rank `ceil(λ/100 · n)` (1-based, at least 1).
    #[default]
    LowerNearestRank,
    /// Linear interpolation between closest ranks over `(n - 1)`.
    Linear,
}

/// `λ`-th percentile of `values` under `rule`. Panics on empty input.
pub fn percentile(values: &[f64], lambda: f64, rule: PercentileRule) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    match rule {
        PercentileRule::LowerNearestRank => {
            let rank = ((lambda / 100.0) * n as f64).ceil() as usize;
            sorted[rank.clamp(1, n) - 1]
        }
        PercentileRule::Linear => {
            let pos = (lambda / 100.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    /// Known class names in classifier index order.
    pub classes: Vec<String>,
    /// `ε_i` per class, same order as `classes`.
    pub epsilon: Vec<f64>,
    pub lambda_percentile: f64,
    pub rule: PercentileRule,
    /// `|T_i|` per class.
    pub support_counts: Vec<usize>,
}

impl ThresholdTable {
    pub fn epsilon_map(&self) -> BTreeMap<&str, f64> {
        self.classes.iter().map(String::as_str).zip(self.epsilon.iter().copied()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table: Self = serde_json::from_slice(&fs::read(path).map_err(io_err(path))?)?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.len() != self.classes.len() || self.support_counts.len() != self.classes.len() {
            return Err(Error::InvalidInput("threshold table columns have different lengths".into()));
        }
        if let Some(e) = self.epsilon.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::InvalidInput(format!("threshold {e} outside [0, 1]")));
        }
        if !(0.0..=100.0).contains(&self.lambda_percentile) {
            return Err(Error::InvalidInput(format!("λ = {} outside [0, 100]", self.lambda_percentile)));
        }
        Ok(())
    }
}

/// Builds the table from softmax outputs of training samples. `T_i` holds
/// `P(i | x)` for every sample of true class `i` whose argmax is `i`; a class
/// with empty `T_i` gets `ε_i = 1`.
pub fn estimate_thresholds(
    probs: &[Vec<f64>],
    labels: &[usize],
    classes: &[String],
    lambda: f64,
    rule: PercentileRule,
) -> Result<ThresholdTable> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} score rows for {} labels", probs.len(), labels.len())));
    }
    if !(0.0..=100.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("λ = {lambda} outside [0, 100]")));
    }
    let k = classes.len();
    let mut confidences = vec![Vec::new(); k];
    for (p, &y) in probs.iter().zip(labels) {
        if p.len() != k {
            return Err(Error::ShapeMismatch(format!("score row of length {} for {k} classes", p.len())));
        }
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        if argmax(p) == y {
            confidences[y].push(p[y]);
        }
    }
    let epsilon = confidences
        .iter()
        .zip(classes)
        .map(|(t, name)| {
            if t.is_empty() {
                log::warn!("class {name} has no correctly classified training sample; its threshold is 1.0");
                1.0
            } else {
                percentile(t, lambda, rule)
            }
        })
        .collect();
    Ok(ThresholdTable {
        classes: classes.to_vec(),
        epsilon,
        lambda_percentile: lambda,
        rule,
        support_counts: confidences.iter().map(Vec::len).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetPrediction {
    /// Known class index, or `None` for UNKNOWN.
    pub predicted_class: Option<usize>,
    pub softmax: Vec<f64>,
    pub max_score: f64,
}

/// A sample is known when some class reaches its threshold (`P(i|x) ≥ ε_i`);
/// known samples take the softmax argmax.
pub fn classify_open_set(softmax: &[f64], thresholds: &ThresholdTable) -> Result<OpenSetPrediction> {
    if softmax.len() != thresholds.epsilon.len() {
        return Err(Error::MissingClass(format!(
            "threshold table has {} classes, scores have {}",
            thresholds.epsilon.len(),
            softmax.len()
        )));
    }
    let accepted = softmax.iter().zip(&thresholds.epsilon).any(|(p, e)| p >= e);
    let best = argmax(softmax);
    Ok(OpenSetPrediction {
        predicted_class: accepted.then_some(best),
        softmax: softmax.to_vec(),
        max_score: softmax[best],
    })
}

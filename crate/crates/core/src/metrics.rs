//! Open-set accuracy, AUROC and per-sample score dumps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::MethodLabel;
use crate::error::{Error, Result};

pub const UNKNOWN: &str = "UNKNOWN";
pub const DEEPFAKE: &str = "DEEPFAKE";

/// One-vs-rest counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Tally {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Per-class tallies over the union of the true and predicted alphabets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionTally<T: Ord> {
    pub classes: BTreeMap<T, Tally>,
}

impl<T: Ord + Clone> ConfusionTally<T> {
    pub fn new(y_true: &[T], y_pred: &[T]) -> Result<Self> {
        if y_true.is_empty() {
            return Err(Error::InvalidInput("tosc of an empty label sequence".into()));
        }
        if y_true.len() != y_pred.len() {
            return Err(Error::ShapeMismatch(format!("{} true labels, {} predictions", y_true.len(), y_pred.len())));
        }
        let alphabet: BTreeSet<&T> = y_true.iter().chain(y_pred).collect();
        let mut classes = BTreeMap::new();
        for c in alphabet {
            let mut t = Tally::default();
            for (yt, yp) in y_true.iter().zip(y_pred) {
                match (yt == c, yp == c) {
                    (true, true) => t.tp += 1,
                    (false, false) => t.tn += 1,
                    (false, true) => t.fp += 1,
                    (true, false) => t.fn_ += 1,
                }
            }
            classes.insert(c.clone(), t);
        }
        Ok(Self { classes })
    }

    /// `Σ(TP+TN) / Σ(TP+TN+FP+FN)` over all classes.
    pub fn accuracy(&self) -> f64 {
        let (mut hit, mut all) = (0usize, 0usize);
        for t in self.classes.values() {
            hit += t.tp + t.tn;
            all += t.total();
        }
        hit as f64 / all as f64
    }
}

/// Open-set accuracy over one-vs-rest tallies, where UNKNOWN is just
/// another label.
pub fn tosc<T: Ord + Clone>(y_true: &[T], y_pred: &[T]) -> Result<f64> {
    Ok(ConfusionTally::new(y_true, y_pred)?.accuracy())
}

fn merge_label(label: &str) -> &str {
    if label == MethodLabel::REAL_NAME {
        label
    } else {
        DEEPFAKE
    }
}

/// [`tosc`] after mapping every non-REAL label (known forgeries and
/// UNKNOWN) to DEEPFAKE.
pub fn tosc_deepfake_merged<S: AsRef<str>>(y_true: &[S], y_pred: &[S]) -> Result<f64> {
    let t: Vec<&str> = y_true.iter().map(|s| merge_label(s.as_ref())).collect();
    let p: Vec<&str> = y_pred.iter().map(|s| merge_label(s.as_ref())).collect();
    tosc(&t, &p)
}

/// Area under the ROC curve as the Mann–Whitney statistic, ties counted
/// as one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::ShapeMismatch(format!("{} scores, {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("AUROC scores contain NaN".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(format!(
            "AUROC is undefined with {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Maximum softmax probability per row; higher means more familiar.
pub fn unknown_detection_scores(probs: &[Vec<f64>]) -> Vec<f64> {
    probs.iter().map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// Score for telling `method` apart from REAL: `P(method) / (P(method) + P(REAL))`.
pub fn method_vs_real_scores(probs: &[Vec<f64>], method: usize, real: usize) -> Vec<f64> {
    probs
        .iter()
        .map(|p| {
            let denom = p[method] + p[real];
            if denom > 0.0 {
                p[method] / denom
            } else {
                0.5
            }
        })
        .collect()
}

/// One row of a per-sample dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub true_label: String,
    pub predicted: String,
    pub max_score: f64,
    /// Whether the sample's method was seen in training.
    pub known: bool,
}

pub fn write_score_dump(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(crate::error::io_err(path))
}

pub fn read_score_dump(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?)
}

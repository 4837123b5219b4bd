//! Weighted precision/recall/F1 and one-vs-rest ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `matrix[true][predicted]` counts.
pub fn confusion_matrix(labels: &[usize], preds: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        m[y][p] += 1;
    }
    m
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct score.
///
/// Returns `None` when either class is missing.
pub fn roc_curve(positive: &[bool], scores: &[f64]) -> Option<Vec<(f64, f64)>> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Some(points)
}

/// Area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum()
}

pub fn roc_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    roc_curve(positive, scores).map(|pts| trapezoid(&pts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// One-vs-rest AUC; `None` when the class or its complement is absent.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_posts: usize,
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// Support-weighted AUC over the classes where it is defined.
    pub weighted_auc: Option<f64>,
    /// Classes left out of `weighted_auc` because their AUC is undefined.
    pub auc_excluded: Vec<usize>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip)]
    pub roc: Vec<Option<Vec<(f64, f64)>>>,
    pub param_count: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores one labeled prediction set.
///
/// `probs[i]` holds the class scores of post `i`; predictions are their argmax.
pub fn evaluate_scores(
    labels: &[usize],
    probs: &[Vec<f64>],
    num_classes: usize,
    param_count: usize,
) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    if labels.len() != probs.len() {
        return Err(Error::contract(format!(
            "{} labels but {} score rows",
            labels.len(),
            probs.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::validation("y", format!("label {y} out of range")));
    }
    if probs.iter().any(|r| r.len() != num_classes) {
        return Err(Error::contract("score rows must have one entry per class"));
    }
    let n = labels.len();
    let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let confusion = confusion_matrix(labels, &preds, num_classes);
    let mut per_class = Vec::with_capacity(num_classes);
    let mut roc = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let curve = roc_curve(&positive, &scores);
        per_class.push(ClassMetrics {
            class: c,
            precision,
            recall,
            f1,
            support,
            auc: curve.as_deref().map(trapezoid),
        });
        roc.push(curve);
    }
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class
            .iter()
            .map(|m| m.support as f64 / n as f64 * f(m))
            .sum()
    };
    let auc_support: usize = per_class
        .iter()
        .filter(|m| m.auc.is_some())
        .map(|m| m.support)
        .sum();
    let weighted_auc = (auc_support > 0).then(|| {
        per_class
            .iter()
            .filter_map(|m| m.auc.map(|a| a * m.support as f64 / auc_support as f64))
            .sum()
    });
    let auc_excluded = per_class
        .iter()
        .filter(|m| m.auc.is_none())
        .map(|m| m.class)
        .collect();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        num_posts: n,
        accuracy: ratio(correct, n),
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        weighted_auc,
        auc_excluded,
        per_class,
        confusion,
        roc,
        param_count,
    })
}

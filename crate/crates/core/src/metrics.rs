//! Classification metrics shared by retrieval and downstream evaluation.

use std::collections::BTreeSet;
use std::hash::Hash;

use crate::error::{AtlasError, Result};

/// Unweighted mean of per-class F1 over every class seen in either `truth`
/// or `pred`. A class with no true and no predicted members never enters.
pub fn macro_f1<T: Eq + Hash + Ord + Clone>(truth: &[T], pred: &[T]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(AtlasError::Argument(format!(
            "{} labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(AtlasError::Degenerate("no samples".into()));
    }
    let classes: BTreeSet<&T> = truth.iter().chain(pred).collect();
    let mut total = 0.0;
    for c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (t, p) in truth.iter().zip(pred) {
            match (t == *c, p == *c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        total += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    Ok(total / classes.len() as f64)
}

pub fn accuracy<T: PartialEq>(truth: &[T], pred: &[T]) -> f64 {
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    hits as f64 / truth.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingScores {
    pub auroc: f64,
    pub auprc: f64,
}

/// AUROC by the trapezoid rule and AUPRC by the average-precision sum.
/// Samples with equal scores are pooled into one threshold step, so
/// constant scores give AUROC 0.5 and AUPRC equal to the positive rate.
pub fn auroc_auprc(scores: &[f64], labels: &[bool]) -> Result<RankingScores> {
    if scores.len() != labels.len() {
        return Err(AtlasError::Argument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(AtlasError::Argument("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(AtlasError::Degenerate("both classes must be present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr, mut prev_recall) = (0.0, 0.0, 0.0);
    let (mut auroc, mut ap) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        auroc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (tpr - prev_recall) * precision;
        prev_tpr = tpr;
        prev_fpr = fpr;
        prev_recall = tpr;
        i = j;
    }
    Ok(RankingScores { auroc, auprc: ap })
}

//! Binary classification metrics and the 99-point threshold sweep.

use std::fmt::Write as _;

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::input("no examples"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::input(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("score is NaN"));
    }
    Ok(())
}

/// Area under the ROC curve: the chance that a random positive scores above
/// a random negative, ties counting one half. Computed from midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept in integers so ties stay exact.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1, midrank (i + j + 2) / 2.
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = 2R − P(P+1)
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Confusion-matrix summary at one threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Predicts positive when `score >= threshold`.
pub fn prf1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Prf1> {
    check(scores, labels)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::input(format!("threshold {threshold} not in (0, 1)")));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::UndefinedMetric("recall needs at least one positive label".into()));
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fn_) as f64;
    // 2PR/(P+R) written over counts, which avoids two roundings.
    let f1 = if tp == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    Ok(Prf1 { precision, recall, f1, accuracy })
}

/// The thresholds 0.01, 0.02, …, 0.99.
pub fn threshold_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdReport {
    pub grid: Vec<f64>,
    pub f1_at: Vec<f64>,
    pub best_threshold: f64,
    pub best_f1: f64,
}

impl ThresholdReport {
    /// `threshold\tf1` lines under a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("threshold\tf1\n");
        for (t, f) in self.grid.iter().zip(&self.f1_at) {
            writeln!(out, "{t:.2}\t{f:.6}").expect("write to String");
        }
        out
    }
}

/// F1 at every grid threshold; ties go to the smallest threshold.
pub fn threshold_sweep(scores: &[f64], labels: &[u8]) -> Result<ThresholdReport> {
    let grid = threshold_grid();
    let f1_at = grid
        .iter()
        .map(|&t| prf1(scores, labels, t).map(|m| m.f1))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, &f) in f1_at.iter().enumerate() {
        if f > f1_at[best] {
            best = i;
        }
    }
    Ok(ThresholdReport {
        best_threshold: grid[best],
        best_f1: f1_at[best],
        grid,
        f1_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_exact() {
        let g = threshold_grid();
        assert_eq!(g.len(), 99);
        assert_eq!(g[0], 0.01);
        assert_eq!(g[49], 0.5);
        assert_eq!(g[98], 0.99);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(auc(&[0.1], &[1, 0]).is_err());
        assert!(prf1(&[], &[], 0.5).is_err());
    }
}

//! Evaluation measures over predicted and ground-truth point maps: aIoU,
//! AUC, SIM and MAE, plus split-level aggregation.

use crate::error::{Error, Result};
use rayon::prelude::*;
use std::fmt::Write as _;

/// `0.01, 0.02, …, 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metrics", &[pred.len()], &[gt.len()]));
    }
    if pred.is_empty() {
        return Err(Error::invalid("metrics", "empty maps"));
    }
    if !pred.iter().chain(gt).all(|v| v.is_finite()) {
        return Err(Error::invalid("metrics", "non-finite value"));
    }
    Ok(())
}

/// IoU of `pred > t` against `gt > 0`, averaged over `thresholds`. `None`
/// when the GT has no positive point.
pub fn aiou(pred: &[f64], gt: &[f64], thresholds: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    if thresholds.is_empty() {
        return Err(Error::invalid("aiou", "no thresholds"));
    }
    if !gt.iter().any(|&v| v > 0.0) {
        return Ok(None);
    }
    let mut total = 0.0;
    for &t in thresholds {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &y) in pred.iter().zip(gt) {
            match (p > t, y > 0.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        total += tp as f64 / (tp + fp + fn_) as f64;
    }
    Ok(Some(total / thresholds.len() as f64))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless `gt > 0` yields both classes.
pub fn auc(pred: &[f64], gt: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let n_pos = gt.iter().filter(|&&v| v > 0.0).count();
    let n_neg = gt.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    // Mid-ranks over tied groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pred[order[j + 1]] == pred[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if gt[k] > 0.0 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok(Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64)))
}

/// `Σ min(P, Q)` after scaling each map to unit sum. `None` when either map
/// sums to zero.
pub fn sim(pred: &[f64], gt: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    if !(sp > 0.0 && sg > 0.0) {
        return Ok(None);
    }
    Ok(Some(pred.iter().zip(gt).map(|(p, g)| (p / sp).min(g / sg)).sum()))
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub aiou: Option<f64>,
    pub auc: Option<f64>,
    pub sim: Option<f64>,
    pub mae: f64,
}

impl SampleMetrics {
    pub fn compute(pred: &[f64], gt: &[f64], thresholds: &[f64]) -> Result<Self> {
        Ok(Self {
            aiou: aiou(pred, gt, thresholds)?,
            auc: auc(pred, gt)?,
            sim: sim(pred, gt)?,
            mae: mae(pred, gt)?,
        })
    }

    pub fn any_undefined(&self) -> bool {
        self.aiou.is_none() || self.auc.is_none() || self.sim.is_none()
    }
}

/// Means over the samples where each metric is defined.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub split: String,
    pub n: usize,
    pub aiou: f64,
    pub auc: f64,
    pub sim: f64,
    pub mae: f64,
    /// Samples with at least one undefined metric.
    pub skipped: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn summarize(split: &str, samples: &[SampleMetrics]) -> Result<SplitSummary> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate_split", format!("split `{split}` is empty")));
    }
    let skipped = samples.iter().filter(|m| m.any_undefined()).count();
    if skipped > 0 {
        log::warn!("{split}: {skipped} of {} samples have an undefined metric", samples.len());
    }
    Ok(SplitSummary {
        split: split.to_owned(),
        n: samples.len(),
        aiou: mean_defined(samples.iter().map(|m| m.aiou)),
        auc: mean_defined(samples.iter().map(|m| m.auc)),
        sim: mean_defined(samples.iter().map(|m| m.sim)),
        mae: mean_defined(samples.iter().map(|m| Some(m.mae))),
        skipped,
    })
}

/// Metrics for every `(pred, gt)` pair, computed in parallel and aggregated
/// in input order.
pub fn evaluate_pairs(split: &str, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<SplitSummary> {
    let thresholds = default_thresholds();
    let samples: Vec<SampleMetrics> = pairs
        .par_iter()
        .map(|(p, g)| SampleMetrics::compute(p, g, &thresholds))
        .collect::<Result<_>>()?;
    summarize(split, &samples)
}

pub const TABLE_HEADER: &str = "split,n,aIoU,AUC,SIM,MAE,skipped";

impl SplitSummary {
    /// aIoU and AUC in percent, SIM and MAE as fractions.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.2},{:.2},{:.3},{:.3},{}",
            self.split,
            self.n,
            self.aiou * 100.0,
            self.auc * 100.0,
            self.sim,
            self.mae,
            self.skipped
        )
    }
}

pub fn to_csv(rows: &[SplitSummary]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_row());
    }
    out
}

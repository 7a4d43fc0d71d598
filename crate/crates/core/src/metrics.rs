//! Ranking metrics and bootstrap confidence intervals.
//!
//! AUROC is the Mann-Whitney statistic with ties counted as one half.
//! AUPRC uses step-wise interpolation: precision is read off after each
//! distinct score threshold (descending) and summed against the recall
//! increments. Confidence intervals are percentile bootstrap over
//! example-level resamples; degenerate resamples are redrawn.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

fn validate(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("scores must be finite".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "need both classes, got {pos} positive / {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Rank-based AUROC; a tied positive/negative pair contributes 0.5.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = validate(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks within tie groups (1-based).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Step-interpolated area under the precision-recall curve:
/// sum over distinct descending thresholds of (R_k - R_{k-1}) * P_k.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = validate(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        // All examples sharing a score cross the threshold together.
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetricKind {
    Auroc,
    Auprc,
}

impl MetricKind {
    pub fn compute(self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            MetricKind::Auroc => auroc(scores, labels),
            MetricKind::Auprc => auprc(scores, labels),
        }
    }
}

const MAX_REDRAWS: u64 = 10_000;

/// Percentile bootstrap CI over example-level resamples with
/// replacement. Each resample derives its own seed, so results are
/// identical regardless of execution order; resamples that draw a single
/// class are redrawn. The interval is widened, if needed, to bracket the
/// point estimate (the percentile method does not guarantee that on its
/// own).
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: MetricKind,
    n_boot: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    validate(scores, labels)?;
    if n_boot == 0 {
        return Err(Error::Config("n_boot must be >= 1".into()));
    }
    let point = metric.compute(scores, labels)?;
    let n = scores.len();
    let mut values: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| -> Result<f64> {
            let mut rng = rng_from_seed(derive_seed(seed, b as u64));
            for _ in 0..MAX_REDRAWS {
                let mut s = Vec::with_capacity(n);
                let mut l = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = rand::Rng::gen_range(&mut rng, 0..n);
                    s.push(scores[k]);
                    l.push(labels[k]);
                }
                if l.iter().any(|&x| x == 1) && l.iter().any(|&x| x == 0) {
                    return metric.compute(&s, &l);
                }
            }
            Err(Error::DegenerateLabels(
                "bootstrap could not draw a two-class resample".into(),
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let low = percentile(&values, 0.025);
    let high = percentile(&values, 0.975);
    Ok((low.min(point), high.max(point)))
}

/// Linear interpolation between order statistics at q*(n-1).
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Point estimates plus 95% bootstrap intervals for one score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auroc_ci_low: f64,
    pub auroc_ci_high: f64,
    pub auprc: f64,
    pub auprc_ci_low: f64,
    pub auprc_ci_high: f64,
    pub n_examples: usize,
    pub n_positive: usize,
    pub n_boot: usize,
    pub seed: u64,
}

pub fn metric_report(
    scores: &[f64],
    labels: &[u8],
    n_boot: usize,
    seed: u64,
) -> Result<MetricReport> {
    let (auroc_lo, auroc_hi) = bootstrap_ci(scores, labels, MetricKind::Auroc, n_boot, seed)?;
    let (auprc_lo, auprc_hi) = bootstrap_ci(scores, labels, MetricKind::Auprc, n_boot, seed)?;
    Ok(MetricReport {
        auroc: auroc(scores, labels)?,
        auroc_ci_low: auroc_lo,
        auroc_ci_high: auroc_hi,
        auprc: auprc(scores, labels)?,
        auprc_ci_low: auprc_lo,
        auprc_ci_high: auprc_hi,
        n_examples: scores.len(),
        n_positive: labels.iter().filter(|&&l| l == 1).count(),
        n_boot,
        seed,
    })
}

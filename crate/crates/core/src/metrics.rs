//! Binary classification metrics: ranking (AUROC, AUPRC) and thresholded
//! (accuracy, balanced accuracy, macro precision and F1).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the labels contain a single class.
    pub au_roc: Option<f64>,
    pub au_prc: Option<f64>,
    pub acc: f64,
    pub bacc: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub n: usize,
    pub threshold: f64,
}

impl MetricsReport {
    /// Field-wise mean. Ranking metrics average over the reports where they
    /// are defined.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let avg_opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(MetricsReport {
            au_roc: avg_opt(|r| r.au_roc),
            au_prc: avg_opt(|r| r.au_prc),
            acc: avg(|r| r.acc),
            bacc: avg(|r| r.bacc),
            macro_precision: avg(|r| r.macro_precision),
            macro_f1: avg(|r| r.macro_f1),
            n: reports.iter().map(|r| r.n).sum(),
            threshold: reports[0].threshold,
        })
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(s));
    }
    Ok(())
}

/// Indices sorted by score, descending; ties keep input order.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from mid-ranks in O(n log n).
pub fn au_roc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, MetricsError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Average precision: step integration of the precision–recall curve with
/// one step per distinct score.
pub fn au_prc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, MetricsError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Ok(None);
    }
    let idx = order_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(Some(ap))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Full report. Thresholded metrics predict positive when `score >= threshold`.
pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport, MetricsError> {
    check(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = scores.len();
    let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let (prec_pos, rec_pos) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let (prec_neg, rec_neg) = (ratio(tn, tn + fn_), ratio(tn, tn + fp));
    // Balanced accuracy averages recall over the classes actually present.
    let present: Vec<f64> = [(tp + fn_, rec_pos), (tn + fp, rec_neg)]
        .into_iter()
        .filter(|&(support, _)| support > 0)
        .map(|(_, r)| r)
        .collect();
    Ok(MetricsReport {
        au_roc: au_roc(scores, labels)?,
        au_prc: au_prc(scores, labels)?,
        acc: ratio(tp + tn, n),
        bacc: present.iter().sum::<f64>() / present.len() as f64,
        macro_precision: (prec_pos + prec_neg) / 2.0,
        macro_f1: (f1(prec_pos, rec_pos) + f1(prec_neg, rec_neg)) / 2.0,
        n,
        threshold,
    })
}

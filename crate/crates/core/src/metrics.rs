//! Confusion counts, ROC/AUC and 95% confidence intervals. COVID is the positive class.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

pub const DEFAULT_CUTOFFS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(preds: &[bool], truths: &[bool]) -> Result<ConfusionCounts> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::dim(format!(
            "confusion needs equal non-empty lengths, got {} predictions and {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in preds.iter().zip(truths) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn point_metrics(c: &ConfusionCounts) -> PointMetrics {
    PointMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

/// Wilson score interval at `z`, clamped to [0, 1].
pub fn wilson_ci_z(successes: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(Error::usage(format!("wilson interval needs 0 ≤ k ≤ n, n ≥ 1; got k={successes}, n={n}")));
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * nf);
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let den = 1.0 + z2 / nf;
    // at k = 0 and k = n one bound is exactly 0 or 1; rounding would miss it
    let lo = if successes == 0 { 0.0 } else { ((centre - half) / den).clamp(0.0, 1.0) };
    let hi = if successes == n { 1.0 } else { ((centre + half) / den).clamp(0.0, 1.0) };
    Ok((lo, hi))
}

pub fn wilson_ci(successes: usize, n: usize) -> Result<(f64, f64)> {
    wilson_ci_z(successes, n, Z95)
}

fn class_counts(truths: &[bool]) -> Result<(usize, usize)> {
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::usage("ROC analysis needs both classes among the truths"));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC: (concordant pairs + ½ ties) / (n⁺·n⁻).
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::dim(format!("{} scores for {} truths", scores.len(), truths.len())));
    }
    let (pos, neg) = class_counts(truths)?;
    // rank-sum with midranks for ties
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| truths[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Scores ≥ threshold are called positive; the first point uses +∞.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from (0, 0) through every distinct score, descending, to (1, 1).
pub fn roc_curve(scores: &[f64], truths: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != truths.len() {
        return Err(Error::dim(format!("{} scores for {} truths", scores.len(), truths.len())));
    }
    let (pos, neg) = class_counts(truths)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Hanley–McNeil standard error of an AUC.
pub fn auc_standard_error(auc: f64, n_pos: usize, n_neg: usize) -> f64 {
    let (p, n) = (n_pos as f64, n_neg as f64);
    let q1 = auc / (2.0 - auc);
    let q2 = 2.0 * auc * auc / (1.0 + auc);
    let var = (auc * (1.0 - auc) + (p - 1.0) * (q1 - auc * auc) + (n - 1.0) * (q2 - auc * auc)) / (p * n);
    var.max(0.0).sqrt()
}

pub fn auc_ci(auc: f64, n_pos: usize, n_neg: usize) -> Result<(f64, f64)> {
    if n_pos == 0 || n_neg == 0 || !(0.0..=1.0).contains(&auc) {
        return Err(Error::usage(format!("auc_ci needs auc in [0,1] and both classes; got {auc}, {n_pos}, {n_neg}")));
    }
    let se = auc_standard_error(auc, n_pos, n_neg);
    Ok(((auc - Z95 * se).clamp(0.0, 1.0), (auc + Z95 * se).clamp(0.0, 1.0)))
}

/// A point estimate with its 95% interval; `None` when undefined.
pub type Estimate = Option<(f64, (f64, f64))>;

#[derive(Clone, Debug, PartialEq)]
pub struct CutoffRow {
    pub cutoff: f64,
    pub counts: ConfusionCounts,
    pub accuracy: Estimate,
    pub sensitivity: Estimate,
    pub specificity: Estimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<CutoffRow>,
    pub auc: f64,
    pub auc_ci: (f64, f64),
    pub roc: Vec<RocPoint>,
}

fn estimate(k: usize, n: usize) -> Result<Estimate> {
    if n == 0 {
        return Ok(None);
    }
    Ok(Some((k as f64 / n as f64, wilson_ci(k, n)?)))
}

/// Thresholds `scores` at each cutoff (positive iff score ≥ cutoff).
pub fn cutoff_sweep(scores: &[f64], truths: &[bool], cutoffs: &[f64]) -> Result<EvaluationReport> {
    let auc = roc_auc(scores, truths)?;
    let (pos, neg) = class_counts(truths)?;
    let mut rows = Vec::with_capacity(cutoffs.len());
    for &cutoff in cutoffs {
        if !cutoff.is_finite() {
            return Err(Error::usage(format!("cutoff {cutoff} is not finite")));
        }
        let preds: Vec<bool> = scores.iter().map(|&s| s >= cutoff).collect();
        let c = confusion(&preds, truths)?;
        rows.push(CutoffRow {
            cutoff,
            counts: c,
            accuracy: estimate(c.tp + c.tn, c.total())?,
            sensitivity: estimate(c.tp, c.tp + c.fn_)?,
            specificity: estimate(c.tn, c.tn + c.fp)?,
        });
    }
    Ok(EvaluationReport { rows, auc, auc_ci: auc_ci(auc, pos, neg)?, roc: roc_curve(scores, truths)? })
}

impl EvaluationReport {
    /// Percentages to one decimal; undefined metrics are written as `undefined`.
    pub fn report_csv(&self) -> String {
        let mut out = String::from(
            "cutoff,accuracy,acc_lo,acc_hi,sensitivity,sens_lo,sens_hi,specificity,spec_lo,spec_hi\n",
        );
        for r in &self.rows {
            write!(out, "{}", r.cutoff).unwrap();
            for e in [r.accuracy, r.sensitivity, r.specificity] {
                match e {
                    Some((p, (lo, hi))) => {
                        write!(out, ",{:.1},{:.1},{:.1}", 100.0 * p, 100.0 * lo, 100.0 * hi).unwrap()
                    }
                    None => out.push_str(",undefined,undefined,undefined"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn auc_txt(&self) -> String {
        format!("auc,lo,hi\n{:.4},{:.4},{:.4}\n", self.auc, self.auc_ci.0, self.auc_ci.1)
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.roc {
            writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_consistent_counts() {
        let m = point_metrics(&ConfusionCounts { tp: 52, fn_: 3, tn: 36, fp: 7 });
        assert!((m.sensitivity.unwrap() - 0.945).abs() < 1e-3);
        assert!((m.specificity.unwrap() - 0.837).abs() < 1e-3);
        assert!((m.accuracy.unwrap() - 0.898).abs() < 1e-3);
    }

    #[test]
    fn undefined_sensitivity() {
        let m = point_metrics(&ConfusionCounts { tp: 0, fn_: 0, tn: 3, fp: 1 });
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.specificity, Some(0.75));
    }

    #[test]
    fn four_pair_auc() {
        let auc = roc_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(roc_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
    }

    #[test]
    fn hanley_mcneil_endpoints() {
        assert_eq!(auc_ci(1.0, 10, 12).unwrap(), (1.0, 1.0));
        assert!((auc_standard_error(0.5, 1, 1) - 0.5).abs() < 1e-12);
        assert_eq!(auc_ci(0.5, 1, 1).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn undefined_written_explicitly() {
        let report = cutoff_sweep(&[0.2, 0.8], &[false, true], &[0.5]).unwrap();
        assert!(report.report_csv().ends_with("0.5,100.0,34.2,100.0,100.0,20.7,100.0,100.0,20.7,100.0\n"));
        let mut r = report.clone();
        r.rows[0].sensitivity = None;
        assert!(r.report_csv().contains(",undefined,undefined,undefined,"));
    }
}

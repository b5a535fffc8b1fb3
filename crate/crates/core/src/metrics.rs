//! Evaluation statistics: regression error summaries with bootstrap
//! intervals, the Wilcoxon signed-rank test, thresholded binary metrics,
//! least-squares agreement, confusion matrices and outlier listing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::datasets::{BinaryLabel, QualityScore};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_THRESHOLD: f64 = 6.5;
pub const DEFAULT_OUTLIER_CUTOFF: f64 = 1.5;
/// Largest number of nonzero differences for which the exact null
/// distribution is enumerated.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("only one class present; AUC undefined")]
    OneClassOnly,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("class index {index} out of range for k={k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub error_sd: f64,
    pub min_error: f64,
    pub max_error: f64,
    pub ci95: (f64, f64),
    pub per_sample_abs_errors: Vec<f64>,
}

pub fn abs_errors(predicted: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    check_lengths(predicted.len(), reference.len())?;
    Ok(predicted
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r).abs())
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Regression summary; the interval comes from [`bootstrap_ci`] with the
/// default resample count.
pub fn regression_report(
    predicted: &[f64],
    reference: &[QualityScore],
    seed: u64,
) -> Result<EvalReport> {
    let reference: Vec<f64> = reference.iter().map(|q| q.value()).collect();
    regression_report_raw(predicted, &reference, seed)
}

pub fn regression_report_raw(
    predicted: &[f64],
    reference: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    let errors = abs_errors(predicted, reference)?;
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = errors.len();
    let mae = mean(&errors);
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let error_sd = if n > 1 {
        (errors.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let min_error = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let ci95 = bootstrap_ci(&errors, DEFAULT_RESAMPLES, DEFAULT_LEVEL, seed)?;
    Ok(EvalReport {
        n,
        mae,
        rmse,
        error_sd,
        min_error,
        max_error,
        ci95,
        per_sample_abs_errors: errors,
    })
}

/// Linear-interpolated quantile of sorted data (type 7).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if resamples < 100 {
        return Err(MetricsError::InvalidArgument(format!(
            "resamples {resamples} < 100"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::InvalidArgument(format!(
            "level {level} not in (0, 1)"
        )));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((
        quantile_sorted(&means, alpha),
        quantile_sorted(&means, 1.0 - alpha),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W-).
    pub statistic: f64,
    pub p_two_sided: f64,
    /// Number of nonzero differences.
    pub n_effective: usize,
    pub method: WilcoxonMethod,
}

/// Midranks (1-based) of `values`.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Paired two-sided Wilcoxon signed-rank test on `a - b`.
///
/// Zero differences are dropped. With at most [`WILCOXON_EXACT_MAX_N`]
/// nonzero differences the p-value comes from the exact permutation
/// distribution of the (midrank) statistic; otherwise from the normal
/// approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    check_lengths(a.len(), b.len())?;
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if d.is_empty() {
        return Err(MetricsError::AllZeroDifferences);
    }
    let n = d.len();
    let ranks = midranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    if n <= WILCOXON_EXACT_MAX_N {
        // Midranks are multiples of 1/2, so doubled ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let t = (statistic * 2.0).round() as usize;
        let tail: f64 = counts[..=t].iter().sum();
        let p = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
        return Ok(WilcoxonResult {
            statistic,
            p_two_sided: p,
            n_effective: n,
            method: WilcoxonMethod::Exact,
        });
    }

    let nf = n as f64;
    let mut abs_sorted: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    abs_sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < abs_sorted.len() {
        let j = abs_sorted[i..]
            .iter()
            .take_while(|v| **v == abs_sorted[i])
            .count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let mean_w = nf * (nf + 1.0) / 4.0;
    let var_w = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var_w <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean_w).abs() - 0.5).max(0.0) / var_w.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(WilcoxonResult {
        statistic,
        p_two_sided: p,
        n_effective: n,
        method: WilcoxonMethod::Normal,
    })
}

/// `score >= threshold` is Good.
pub fn binarize(scores: &[f64], threshold: f64) -> Vec<BinaryLabel> {
    scores
        .iter()
        .map(|&s| {
            if s >= threshold {
                BinaryLabel::Good
            } else {
                BinaryLabel::Poor
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mcc: f64,
    /// `None` when only one class is present in the reference.
    pub auc: Option<f64>,
}

impl BinaryReport {
    /// Rates from confusion counts (Good is the positive class). Rates with a
    /// zero denominator are reported as 0.
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            threshold,
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            mcc: mcc(tp, fp, tn, fn_),
            auc: None,
        }
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(tp: usize, fp: usize, tn: usize, fn_: usize) -> f64 {
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / denom
    }
}

/// P(score of a Good sample > score of a Poor sample), ties counting 1/2.
///
/// Computed from midranks in O(n log n).
pub fn auc(scores: &[f64], reference: &[BinaryLabel]) -> Result<f64> {
    check_lengths(scores.len(), reference.len())?;
    let pos = reference
        .iter()
        .filter(|l| **l == BinaryLabel::Good)
        .count();
    let neg = reference.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(reference)
        .filter(|(_, l)| **l == BinaryLabel::Good)
        .map(|(r, _)| r)
        .sum();
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn binary_report(
    scores: &[f64],
    reference: &[BinaryLabel],
    threshold: f64,
) -> Result<BinaryReport> {
    check_lengths(scores.len(), reference.len())?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (pred, truth) in binarize(scores, threshold).iter().zip(reference) {
        match (pred, truth) {
            (BinaryLabel::Good, BinaryLabel::Good) => tp += 1,
            (BinaryLabel::Good, BinaryLabel::Poor) => fp += 1,
            (BinaryLabel::Poor, BinaryLabel::Poor) => tn += 1,
            (BinaryLabel::Poor, BinaryLabel::Good) => fn_ += 1,
        }
    }
    let mut report = BinaryReport::from_counts(threshold, tp, fp, tn, fn_);
    report.auc = match auc(scores, reference) {
        Ok(a) => Some(a),
        Err(MetricsError::OneClassOnly) => {
            log::warn!("AUC undefined: reference contains a single class");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `reference` on `predicted`.
///
/// A constant reference gives `r2 = 0` with a warning.
pub fn linear_fit_r2(predicted: &[f64], reference: &[f64]) -> Result<LinearFit> {
    check_lengths(predicted.len(), reference.len())?;
    if predicted.len() < 2 {
        return Err(MetricsError::DegenerateInput("need at least two points"));
    }
    let mx = mean(predicted);
    let my = mean(reference);
    let sxx: f64 = predicted.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::DegenerateInput("predicted has zero variance"));
    }
    let sxy: f64 = predicted
        .iter()
        .zip(reference)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = reference.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = predicted
        .iter()
        .zip(reference)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        log::warn!("reference has zero variance; reporting r2 = 0");
        0.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
    })
}

/// `m[i][j]` counts samples with reference `i` predicted as `j`.
pub fn multiclass_confusion(
    predicted: &[usize],
    reference: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    check_lengths(predicted.len(), reference.len())?;
    let mut m = vec![vec![0; k]; k];
    for (&p, &r) in predicted.iter().zip(reference) {
        for index in [p, r] {
            if index >= k {
                return Err(MetricsError::IndexOutOfRange { index, k });
            }
        }
        m[r][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub id: String,
    pub predicted: f64,
    pub reference: f64,
    pub delta: f64,
}

/// Samples with `|p - r| > cutoff`, largest first.
pub fn outliers(
    predicted: &[f64],
    reference: &[f64],
    ids: &[String],
    cutoff: f64,
) -> Result<Vec<Outlier>> {
    check_lengths(predicted.len(), reference.len())?;
    check_lengths(predicted.len(), ids.len())?;
    let mut out: Vec<Outlier> = predicted
        .iter()
        .zip(reference)
        .zip(ids)
        .filter(|((p, r), _)| (*p - *r).abs() > cutoff)
        .map(|((p, r), id)| Outlier {
            id: id.clone(),
            predicted: *p,
            reference: *r,
            delta: p - r,
        })
        .collect();
    out.sort_by(|a, b| {
        b.delta
            .abs()
            .total_cmp(&a.delta.abs())
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(out)
}

/// Relative reduction from `before` to `after`, in percent.
pub fn relative_improvement(before: f64, after: f64) -> f64 {
    (before - after) / before * 100.0
}

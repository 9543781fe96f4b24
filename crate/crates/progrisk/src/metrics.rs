//! Ranking metrics over scored records: AUROC, AUPRC, percentile bootstrap
//! confidence intervals, and the paired DeLong comparison of two models.
//!
//! A record is `(score, label)`. AUROC is the Mann-Whitney statistic with
//! midrank tie handling, `O(n log n)`; AUPRC is average precision with tied
//! scores processed as one block and no interpolation. Degenerate inputs
//! (single class, no positives) are errors, never NaN.

use crate::{exec, seed};
use rand::Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("no records")]
    Empty,
    #[error("records contain a single class ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("no positive records")]
    NoPositives,
    #[error("score arrays differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("bootstrap cap exhausted: resample {resample} drew {attempts} single-class resamples in a row")]
    ResampleCapExhausted { resample: usize, attempts: usize },
    #[error("paired test needs at least two records of each class, got {positives} positives and {negatives} negatives")]
    TooFewPerClass { positives: usize, negatives: usize },
}

fn validate(records: &[(f64, bool)]) -> Result<(usize, usize), MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    for (i, (score, _)) in records.iter().enumerate() {
        if !score.is_finite() {
            return Err(MetricError::NonFiniteScore(i));
        }
    }
    let positives = records.iter().filter(|(_, y)| *y).count();
    Ok((positives, records.len() - positives))
}

/// Ranks `1..=n` with tied values assigned the mean of their rank range.
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve: the probability that a random positive outscores
/// a random negative, ties counting one half. Errors when only one class is
/// present.
pub fn auroc(records: &[(f64, bool)]) -> Result<f64, MetricError> {
    let (positives, negatives) = validate(records)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let scores: Vec<f64> = records.iter().map(|(s, _)| *s).collect();
    let ranks = midranks(&scores);
    let pos_rank_sum: f64 = records
        .iter()
        .zip(&ranks)
        .filter(|((_, y), _)| *y)
        .map(|(_, r)| *r)
        .sum();
    let m = positives as f64;
    Ok((pos_rank_sum - m * (m + 1.0) / 2.0) / (m * negatives as f64))
}

/// Average precision: the sum over distinct thresholds of precision times the
/// recall gained at that threshold, descending, ties taken as one block, no
/// interpolation. Errors when no positive record exists.
pub fn auprc(records: &[(f64, bool)]) -> Result<f64, MetricError> {
    let (positives, _) = validate(records)?;
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].0.total_cmp(&records[a].0));
    let total_pos = positives as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall_prev = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].0 == records[order[i]].0 {
            j += 1;
        }
        for &k in &order[i..=j] {
            if records[k].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / total_pos;
        let precision = tp / (tp + fp);
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Auroc,
    Auprc,
}

impl MetricKind {
    fn compute(self, records: &[(f64, bool)]) -> Result<f64, MetricError> {
        match self {
            MetricKind::Auroc => auroc(records),
            MetricKind::Auprc => auprc(records),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapParams {
    pub n_resamples: usize,
    /// Two-sided confidence level, e.g. 0.95.
    pub level: f64,
    pub seed: u64,
    pub threads: exec::Threads,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        BootstrapParams { n_resamples: 2000, level: 0.95, seed: 0, threads: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
}

/// How many times one resample may come up single-class before the whole
/// bootstrap aborts; the total attempt budget is therefore
/// `ATTEMPTS_PER_RESAMPLE * n_resamples`.
const ATTEMPTS_PER_RESAMPLE: usize = 10;

/// Percentile bootstrap interval for a metric, resampling records with
/// replacement. Single-class resamples are rejected and redrawn. Every
/// resample draws from its own seeded stream, so the interval is identical
/// for any thread count.
pub fn bootstrap_ci(
    records: &[(f64, bool)],
    kind: MetricKind,
    params: &BootstrapParams,
) -> Result<ConfidenceInterval, MetricError> {
    if params.n_resamples < 100 {
        return Err(MetricError::InvalidParams(format!(
            "n_resamples must be at least 100, got {}",
            params.n_resamples
        )));
    }
    if !(params.level > 0.0 && params.level < 1.0) {
        return Err(MetricError::InvalidParams(format!("level must be in (0, 1), got {}", params.level)));
    }
    // Surface degenerate inputs before resampling.
    kind.compute(records)?;

    let n = records.len();
    let resampled: Vec<Result<f64, MetricError>> = exec::map_indexed(params.n_resamples, params.threads, |i| {
        let mut rng = seed::rng_for(params.seed, "metrics.bootstrap", &[i as u64]);
        let mut draw = Vec::with_capacity(n);
        for attempt in 1..=ATTEMPTS_PER_RESAMPLE {
            draw.clear();
            for _ in 0..n {
                draw.push(records[rng.gen_range(0..n)]);
            }
            let positives = draw.iter().filter(|(_, y)| *y).count();
            if positives == 0 || positives == n {
                if attempt == ATTEMPTS_PER_RESAMPLE {
                    return Err(MetricError::ResampleCapExhausted { resample: i, attempts: attempt });
                }
                continue;
            }
            return kind.compute(&draw);
        }
        unreachable!("loop either returns a value or the cap error");
    });

    let mut values = Vec::with_capacity(params.n_resamples);
    for r in resampled {
        values.push(r?);
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let alpha = 1.0 - params.level;
    let b = values.len();
    let lower_ix = ((alpha / 2.0) * b as f64).floor() as usize;
    let upper_ix = (((1.0 - alpha / 2.0) * b as f64).floor() as usize).min(b - 1);
    Ok(ConfidenceInterval { lower: values[lower_ix], upper: values[upper_ix] })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelongResult {
    pub auroc_a: f64,
    pub auroc_b: f64,
    /// Two-sided p-value; exactly 1.0 when the variance of the difference is
    /// numerically zero.
    pub p_value: f64,
}

/// Variance floor below which two AUROCs are reported as indistinguishable.
const DELONG_VARIANCE_FLOOR: f64 = 1e-15;

/// DeLong structural components via midranks: one value per positive (V10)
/// and one per negative (V01).
fn structural_components(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos_scores: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y).map(|(s, _)| *s).collect();
    let neg_scores: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| !y).map(|(s, _)| *s).collect();
    let rank_all = midranks(scores);
    let rank_pos = midranks(&pos_scores);
    let rank_neg = midranks(&neg_scores);
    let m = pos_scores.len() as f64;
    let n = neg_scores.len() as f64;

    let mut v10 = Vec::with_capacity(pos_scores.len());
    let mut v01 = Vec::with_capacity(neg_scores.len());
    let mut ip = 0;
    let mut in_ = 0;
    for (k, &y) in labels.iter().enumerate() {
        if y {
            v10.push((rank_all[k] - rank_pos[ip]) / n);
            ip += 1;
        } else {
            v01.push(1.0 - (rank_all[k] - rank_neg[in_]) / m);
            in_ += 1;
        }
    }
    (v10, v01)
}

fn covariance(xs: &[f64], x_mean: f64, ys: &[f64], y_mean: f64) -> f64 {
    let n = xs.len();
    debug_assert!(n >= 2);
    xs.iter().zip(ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum::<f64>() / (n - 1) as f64
}

/// Paired DeLong test comparing the AUROCs of two score vectors over the same
/// records. Returns both AUROCs (computed through [`auroc`], so they agree
/// with it exactly) and a two-sided normal p-value.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult, MetricError> {
    if scores_a.len() != scores_b.len() {
        return Err(MetricError::LengthMismatch { left: scores_a.len(), right: scores_b.len() });
    }
    if scores_b.len() != labels.len() {
        return Err(MetricError::LengthMismatch { left: scores_b.len(), right: labels.len() });
    }
    let records_a: Vec<(f64, bool)> = scores_a.iter().copied().zip(labels.iter().copied()).collect();
    let records_b: Vec<(f64, bool)> = scores_b.iter().copied().zip(labels.iter().copied()).collect();
    let auroc_a = auroc(&records_a)?;
    let auroc_b = auroc(&records_b)?;

    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives < 2 || negatives < 2 {
        return Err(MetricError::TooFewPerClass { positives, negatives });
    }

    let (v10_a, v01_a) = structural_components(scores_a, labels);
    let (v10_b, v01_b) = structural_components(scores_b, labels);
    let m = positives as f64;
    let n = negatives as f64;

    let s10 = [
        covariance(&v10_a, auroc_a, &v10_a, auroc_a),
        covariance(&v10_a, auroc_a, &v10_b, auroc_b),
        covariance(&v10_b, auroc_b, &v10_b, auroc_b),
    ];
    let s01 = [
        covariance(&v01_a, auroc_a, &v01_a, auroc_a),
        covariance(&v01_a, auroc_a, &v01_b, auroc_b),
        covariance(&v01_b, auroc_b, &v01_b, auroc_b),
    ];
    let var_a = s10[0] / m + s01[0] / n;
    let cov_ab = s10[1] / m + s01[1] / n;
    let var_b = s10[2] / m + s01[2] / n;
    let var_diff = var_a + var_b - 2.0 * cov_ab;

    let p_value = if var_diff < DELONG_VARIANCE_FLOOR {
        1.0
    } else {
        let z = (auroc_a - auroc_b) / var_diff.sqrt();
        libm::erfc(z.abs() / std::f64::consts::SQRT_2)
    };
    Ok(DelongResult { auroc_a, auroc_b, p_value })
}

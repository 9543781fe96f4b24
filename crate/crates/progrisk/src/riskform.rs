//! Risk heads over encoder logits, with losses and analytic gradients.
//!
//! A knee contributes one or two scans. The first scan's risk is always
//! `sigmoid(f_logit1)`. For the second scan three heads exist:
//!
//! * `form1`: risk accumulates over the pair, `y2 = 1 - (1-s1)(1-s2)` with
//!   `s_i = sigmoid(f_logit_i)`, so the later scan can never look safer than
//!   the earlier one.
//! * `form2`: a second encoder gates the survival of the first scan,
//!   `y2 = 1 - (1-s1) * sigmoid(g_logit2)`; larger `g` means lower risk.
//! * `baseline`: two independent sigmoids with no coupling.
//!
//! Losses are binary cross-entropies evaluated in log space: both
//! `log(y2)` and `log(1-y2)` come from log-sigmoid sums (never from the
//! rounded probability), so losses and gradients stay finite for logits far
//! beyond sigmoid saturation. Probabilities are clamped only when exported
//! for serialization, never inside losses or gradients.

use serde::{Deserialize, Serialize};

/// Probabilities written to disk are clamped into
/// `[EXPORT_EPSILON, 1 - EXPORT_EPSILON]`.
pub const EXPORT_EPSILON: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RiskformError {
    #[error("non-finite logit passed to {0}")]
    NonFiniteLogit(&'static str),
    #[error("labels do not match prediction: second-scan label {label}, second-scan prediction {prediction}")]
    LabelMismatch { label: &'static str, prediction: &'static str },
}

/// Prediction horizon for event labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Horizon {
    OneYear,
    TwoYear,
    FourYear,
}

impl Horizon {
    pub const ALL: [Horizon; 3] = [Horizon::OneYear, Horizon::TwoYear, Horizon::FourYear];

    pub fn years(self) -> u32 {
        match self {
            Horizon::OneYear => 1,
            Horizon::TwoYear => 2,
            Horizon::FourYear => 4,
        }
    }

    pub fn months(self) -> u32 {
        self.years() * 12
    }

    pub fn from_years(years: u32) -> Option<Horizon> {
        match years {
            1 => Some(Horizon::OneYear),
            2 => Some(Horizon::TwoYear),
            4 => Some(Horizon::FourYear),
            _ => None,
        }
    }
}

impl std::fmt::Display for Horizon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}yr", self.years())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x` or cancellation for small.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(sigmoid(z)) = -softplus(-z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// `ln(1 - e^l)` for `l <= 0`, accurate near both ends.
fn log1m_exp(l: f64) -> f64 {
    debug_assert!(l <= 0.0);
    if l > -std::f64::consts::LN_2 {
        (-l.exp_m1()).ln()
    } else {
        (-l.exp()).ln_1p()
    }
}

/// Clamps a probability into the exportable open interval. Apply only when
/// serializing; in-memory values stay exact.
pub fn clamp_for_export(p: f64) -> f64 {
    p.clamp(EXPORT_EPSILON, 1.0 - EXPORT_EPSILON)
}

/// Which head produced a [`PairPrediction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    SingleScan,
    Baseline,
    Form1,
    Form2,
}

/// Risk for one knee's scan(s), with log-space companions for stable losses.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    kind: PairKind,
    logit1: f64,
    /// `f_logit2` for baseline/form1, `g_logit2` for form2.
    logit2: Option<f64>,
    /// First-scan risk, `sigmoid(f_logit1)`.
    pub y1_hat: f64,
    /// Second-scan risk; absent for single-scan knees.
    pub y2_hat: Option<f64>,
    /// `ln(y2_hat)` computed in log space.
    pub log_y2_hat: Option<f64>,
    /// `ln(1 - y2_hat)` computed in log space.
    pub log_one_minus_y2_hat: Option<f64>,
}

impl PairPrediction {
    pub fn kind(&self) -> PairKind {
        self.kind
    }

    pub fn logit1(&self) -> f64 {
        self.logit1
    }

    pub fn logit2(&self) -> Option<f64> {
        self.logit2
    }
}

fn check_finite(logit: f64, op: &'static str) -> Result<(), RiskformError> {
    if logit.is_finite() {
        Ok(())
    } else {
        Err(RiskformError::NonFiniteLogit(op))
    }
}

/// Risk of a knee observed at a single scan: `sigmoid(f_logit)`.
pub fn predict_single(f_logit: f64) -> Result<PairPrediction, RiskformError> {
    check_finite(f_logit, "predict_single")?;
    Ok(PairPrediction {
        kind: PairKind::SingleScan,
        logit1: f_logit,
        logit2: None,
        y1_hat: sigmoid(f_logit),
        y2_hat: None,
        log_y2_hat: None,
        log_one_minus_y2_hat: None,
    })
}

/// Accumulated risk over two scans of one encoder `f`:
/// `y2 = 1 - (1-s1)(1-s2)`. Symmetric in the two logits and never below
/// either single-scan risk.
pub fn predict_pair_form1(f_logit1: f64, f_logit2: f64) -> Result<PairPrediction, RiskformError> {
    check_finite(f_logit1, "predict_pair_form1")?;
    check_finite(f_logit2, "predict_pair_form1")?;
    let s1 = sigmoid(f_logit1);
    let s2 = sigmoid(f_logit2);
    let log_one_minus_y2 = log_sigmoid(-f_logit1) + log_sigmoid(-f_logit2);
    Ok(PairPrediction {
        kind: PairKind::Form1,
        logit1: f_logit1,
        logit2: Some(f_logit2),
        y1_hat: s1,
        y2_hat: Some(1.0 - (1.0 - s1) * (1.0 - s2)),
        log_y2_hat: Some(log1m_exp(log_one_minus_y2)),
        log_one_minus_y2_hat: Some(log_one_minus_y2),
    })
}

/// Gated risk over two scans: `y2 = 1 - (1-s1) * sigmoid(g_logit2)`, where
/// the gate comes from a second encoder and larger `g_logit2` means lower
/// risk. Still never below the first-scan risk.
pub fn predict_pair_form2(f_logit1: f64, g_logit2: f64) -> Result<PairPrediction, RiskformError> {
    check_finite(f_logit1, "predict_pair_form2")?;
    check_finite(g_logit2, "predict_pair_form2")?;
    let s1 = sigmoid(f_logit1);
    let sg = sigmoid(g_logit2);
    let log_one_minus_y2 = log_sigmoid(-f_logit1) + log_sigmoid(g_logit2);
    Ok(PairPrediction {
        kind: PairKind::Form2,
        logit1: f_logit1,
        logit2: Some(g_logit2),
        y1_hat: s1,
        y2_hat: Some(1.0 - (1.0 - s1) * sg),
        log_y2_hat: Some(log1m_exp(log_one_minus_y2)),
        log_one_minus_y2_hat: Some(log_one_minus_y2),
    })
}

/// Two independent sigmoids with no coupling between scans.
pub fn predict_pair_baseline(f_logit1: f64, f_logit2: f64) -> Result<PairPrediction, RiskformError> {
    check_finite(f_logit1, "predict_pair_baseline")?;
    check_finite(f_logit2, "predict_pair_baseline")?;
    Ok(PairPrediction {
        kind: PairKind::Baseline,
        logit1: f_logit1,
        logit2: Some(f_logit2),
        y1_hat: sigmoid(f_logit1),
        y2_hat: Some(sigmoid(f_logit2)),
        log_y2_hat: Some(log_sigmoid(f_logit2)),
        log_one_minus_y2_hat: Some(log_sigmoid(-f_logit2)),
    })
}

/// Event labels for the scans of one knee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLabels {
    pub y1: bool,
    /// Present exactly when the knee has a second scan.
    pub y2: Option<bool>,
    pub horizon: Horizon,
}

/// Loss value and its gradients in the input logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    /// Gradient in `f_logit1`.
    pub d_logit1: f64,
    /// Gradient in the second logit (`f_logit2` or `g_logit2`).
    pub d_logit2: Option<f64>,
}

/// Binary cross-entropy of `sigmoid(logit)` against `y`, via softplus.
fn bce_from_logit(logit: f64, y: bool) -> (f64, f64) {
    let loss = if y { softplus(-logit) } else { softplus(logit) };
    let grad = sigmoid(logit) - f64::from(y);
    (loss, grad)
}

/// Total training loss for one knee: `BCE(y1, y1_hat)` plus, when a second
/// scan exists, `BCE(y2, y2_hat)` under the prediction's own head. Gradients
/// are exact derivatives of the returned loss in the input logits.
pub fn pair_loss(pred: &PairPrediction, labels: &PairLabels) -> Result<PairLoss, RiskformError> {
    match (pred.y2_hat.is_some(), labels.y2.is_some()) {
        (true, false) => {
            return Err(RiskformError::LabelMismatch { label: "absent", prediction: "present" });
        }
        (false, true) => {
            return Err(RiskformError::LabelMismatch { label: "present", prediction: "absent" });
        }
        _ => {}
    }

    let (loss1, d1) = bce_from_logit(pred.logit1, labels.y1);
    let Some(y2) = labels.y2 else {
        return Ok(PairLoss { loss: loss1, d_logit1: d1, d_logit2: None });
    };
    let logit2 = pred.logit2.expect("paired prediction carries a second logit");

    match pred.kind {
        PairKind::SingleScan => unreachable!("single-scan predictions have no y2_hat"),
        PairKind::Baseline => {
            let (loss2, d2) = bce_from_logit(logit2, y2);
            Ok(PairLoss { loss: loss1 + loss2, d_logit1: d1, d_logit2: Some(d2) })
        }
        PairKind::Form1 | PairKind::Form2 => {
            let log_y2 = pred.log_y2_hat.expect("paired prediction carries log companions");
            let log_1m_y2 = pred.log_one_minus_y2_hat.expect("paired prediction carries log companions");
            let s1 = pred.y1_hat;
            let loss2 = if y2 { -log_y2 } else { -log_1m_y2 };
            // (1 - y2_hat) / y2_hat, formed from the log companions so it is
            // meaningful even when y2_hat rounds to 0 or 1.
            let odds_against = (log_1m_y2 - log_y2).exp();
            let d2_common = if y2 { -odds_against } else { 1.0 };
            let (dl1, dl2) = match pred.kind {
                PairKind::Form1 => {
                    let s2 = sigmoid(logit2);
                    (s1 * d2_common, s2 * d2_common)
                }
                PairKind::Form2 => {
                    let sg = sigmoid(logit2);
                    // Gate gradient has the opposite sign: raising g lowers risk.
                    (s1 * d2_common, -(1.0 - sg) * d2_common)
                }
                _ => unreachable!(),
            };
            Ok(PairLoss { loss: loss1 + loss2, d_logit1: d1 + dl1, d_logit2: Some(dl2) })
        }
    }
}

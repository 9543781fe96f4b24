//! Penalties that push a plain two-sigmoid head toward progressive risk.
//!
//! Both penalties act on a single shared encoder trained with independent
//! per-scan cross-entropy. The contrastive penalty shapes the penultimate
//! representations of a knee's two scans: pairs whose labels agree are pulled
//! together, pairs whose labels differ are pushed at least a margin apart.
//! The ranking penalty acts on the logits:
//!
//! `max(0, log_sigmoid(f_logit1) - log_sigmoid(f_logit2) + margin)`
//!
//! evaluated exactly as written. Hinges use the zero subgradient at their
//! boundary, matching the convention in [`crate::gradnet`] for relu.

use serde::{Deserialize, Serialize};

use crate::gradnet::ForwardTrace;
use crate::riskform::{self, log_sigmoid, sigmoid, PairKind, PairLabels, PairPrediction};

#[derive(Debug, thiserror::Error)]
pub enum RegError {
    #[error("invalid regularizer config: {0}")]
    InvalidConfig(String),
    #[error("representation lengths differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("regularized loss needs a baseline paired prediction, got {0}")]
    WrongHead(&'static str),
    #[error(transparent)]
    Loss(#[from] riskform::RiskformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegKind {
    ConReg,
    RiskReg,
    Both,
}

impl RegKind {
    fn uses_contrastive(self) -> bool {
        matches!(self, RegKind::ConReg | RegKind::Both)
    }

    fn uses_ranking(self) -> bool {
        matches!(self, RegKind::RiskReg | RegKind::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub kind: RegKind,
    pub margin: f64,
    /// Penalty weight shared by every active penalty.
    pub gamma: f64,
}

impl RegConfig {
    pub fn validate(&self) -> Result<(), RegError> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(RegError::InvalidConfig(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(RegError::InvalidConfig(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Contrastive penalty value with its gradients in both representations.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub d_h1: Vec<f64>,
    pub d_h2: Vec<f64>,
}

/// Siamese contrastive penalty on two representations:
/// `d^2` when the labels agree, `max(0, margin - d)^2` when they differ,
/// with `d = ||h2 - h1||`. At `d = 0` for a differing pair the distance is
/// not differentiable; the zero subgradient is used.
pub fn contrastive_loss(h1: &[f64], h2: &[f64], same_label: bool, margin: f64) -> Result<ContrastiveLoss, RegError> {
    if h1.len() != h2.len() {
        return Err(RegError::DimensionMismatch { left: h1.len(), right: h2.len() });
    }
    if !(margin.is_finite() && margin > 0.0) {
        return Err(RegError::InvalidConfig(format!("margin must be positive, got {margin}")));
    }
    let diff: Vec<f64> = h2.iter().zip(h1).map(|(b, a)| b - a).collect();
    let dist_sq: f64 = diff.iter().map(|v| v * v).sum();
    let dist = dist_sq.sqrt();

    if same_label {
        let d_h2: Vec<f64> = diff.iter().map(|v| 2.0 * v).collect();
        let d_h1: Vec<f64> = d_h2.iter().map(|v| -v).collect();
        return Ok(ContrastiveLoss { loss: dist_sq, d_h1, d_h2 });
    }

    let slack = margin - dist;
    if slack <= 0.0 || dist == 0.0 {
        let (loss, zeros) = if dist == 0.0 && slack > 0.0 {
            (slack * slack, vec![0.0; h1.len()])
        } else {
            (0.0, vec![0.0; h1.len()])
        };
        return Ok(ContrastiveLoss { loss, d_h1: zeros.clone(), d_h2: zeros });
    }
    // d/dh2 (margin - d)^2 = -2 (margin - d) * (h2 - h1) / d
    let scale = -2.0 * slack / dist;
    let d_h2: Vec<f64> = diff.iter().map(|v| scale * v).collect();
    let d_h1: Vec<f64> = d_h2.iter().map(|v| -v).collect();
    Ok(ContrastiveLoss { loss: slack * slack, d_h1, d_h2 })
}

/// Ranking penalty value with its gradients in both logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingLoss {
    pub loss: f64,
    pub d_logit1: f64,
    pub d_logit2: f64,
}

/// Hinge on the gap between log risks of the two scans:
/// `max(0, log_sigmoid(f_logit1) - log_sigmoid(f_logit2) + margin)`.
pub fn riskreg_loss(f_logit1: f64, f_logit2: f64, margin: f64) -> Result<RankingLoss, RegError> {
    if !(margin.is_finite() && margin > 0.0) {
        return Err(RegError::InvalidConfig(format!("margin must be positive, got {margin}")));
    }
    if !f_logit1.is_finite() || !f_logit2.is_finite() {
        return Err(RegError::InvalidConfig("logits must be finite".into()));
    }
    let arg = log_sigmoid(f_logit1) - log_sigmoid(f_logit2) + margin;
    if arg <= 0.0 {
        return Ok(RankingLoss { loss: 0.0, d_logit1: 0.0, d_logit2: 0.0 });
    }
    // d log_sigmoid(z) / dz = sigmoid(-z)
    Ok(RankingLoss { loss: arg, d_logit1: sigmoid(-f_logit1), d_logit2: -sigmoid(-f_logit2) })
}

/// Regularized training loss for one paired knee, with every gradient the
/// harness needs to backpropagate.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedLoss {
    pub loss: f64,
    pub d_logit1: f64,
    pub d_logit2: f64,
    pub d_penultimate1: Vec<f64>,
    pub d_penultimate2: Vec<f64>,
}

/// Cross-entropy of the baseline head on both scans plus `gamma` times each
/// active penalty. Gradients flow into the logits (cross-entropy and ranking
/// penalty) and into the penultimate representations (contrastive penalty).
pub fn total_regularized_loss(
    pred: &PairPrediction,
    labels: &PairLabels,
    trace1: &ForwardTrace,
    trace2: &ForwardTrace,
    config: &RegConfig,
) -> Result<RegularizedLoss, RegError> {
    total_regularized_loss_with_reps(pred, labels, &trace1.penultimate, &trace2.penultimate, config)
}

/// [`total_regularized_loss`] with the penultimate representations passed
/// directly; the traces carry nothing else the loss needs.
pub fn total_regularized_loss_with_reps(
    pred: &PairPrediction,
    labels: &PairLabels,
    h1: &[f64],
    h2: &[f64],
    config: &RegConfig,
) -> Result<RegularizedLoss, RegError> {
    config.validate()?;
    if pred.kind() != PairKind::Baseline {
        let name = match pred.kind() {
            PairKind::SingleScan => "a single-scan prediction",
            PairKind::Form1 => "a form1 prediction",
            PairKind::Form2 => "a form2 prediction",
            PairKind::Baseline => unreachable!(),
        };
        return Err(RegError::WrongHead(name));
    }
    let Some(y2) = labels.y2 else {
        return Err(riskform::RiskformError::LabelMismatch { label: "absent", prediction: "present" }.into());
    };

    let bce = riskform::pair_loss(pred, labels)?;
    let mut loss = bce.loss;
    let mut d_logit1 = bce.d_logit1;
    let mut d_logit2 = bce.d_logit2.expect("baseline pair has a second-logit gradient");
    let mut d_penultimate1 = vec![0.0; h1.len()];
    let mut d_penultimate2 = vec![0.0; h2.len()];

    if config.kind.uses_contrastive() {
        let same_label = labels.y1 == y2;
        let con = contrastive_loss(h1, h2, same_label, config.margin)?;
        loss += config.gamma * con.loss;
        for (acc, g) in d_penultimate1.iter_mut().zip(&con.d_h1) {
            *acc += config.gamma * g;
        }
        for (acc, g) in d_penultimate2.iter_mut().zip(&con.d_h2) {
            *acc += config.gamma * g;
        }
    }
    if config.kind.uses_ranking() {
        let l1 = pred.logit1();
        let l2 = pred.logit2().expect("baseline pair carries a second logit");
        let rank = riskreg_loss(l1, l2, config.margin)?;
        loss += config.gamma * rank.loss;
        d_logit1 += config.gamma * rank.d_logit1;
        d_logit2 += config.gamma * rank.d_logit2;
    }

    Ok(RegularizedLoss { loss, d_logit1, d_logit2, d_penultimate1, d_penultimate2 })
}

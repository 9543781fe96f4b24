//! Nested cross-validation over subjects: stratified outer folds for
//! testing, rotating inner validation folds for checkpoint selection, and an
//! ensemble built from every trained member.
//!
//! With `outer_folds = 7` the harness trains `7 * 6 = 42` members. Member
//! `(o, v)` holds out outer fold `o` entirely, validates on the `v`-th of the
//! remaining folds, and trains on the other five. All grouping happens at the
//! subject level, so no subject's scans ever straddle a member's train,
//! validation, or test sets.
//!
//! Every random choice (fold assignment, weight init, epoch shuffles) comes
//! from a stream derived from the master seed and the member coordinates, so
//! results are identical regardless of the worker thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohortgen::{assign_group, Cohort, GroupLabel, KneeRecord, Role, SimError, SubjectId};
use crate::exec::{self, Threads};
use crate::gradnet::{
    self, Activation, AdamConfig, AdamState, EncoderConfig, EncoderModel, Gradients, ModelError,
};
use crate::metrics;
use crate::regularizers::{total_regularized_loss_with_reps, RegConfig, RegError, RegKind};
use crate::riskform::{
    pair_loss, predict_pair_baseline, predict_pair_form1, predict_pair_form2, predict_single,
    Horizon, PairLabels, PairPrediction, RiskformError,
};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum CvError {
    #[error("invalid harness settings: {0}")]
    InvalidSettings(String),
    #[error("duplicate subject id {0}")]
    DuplicateSubject(SubjectId),
    #[error("{role:?} stratum has {available} subjects but {required} folds need one each")]
    TooFewSubjects { role: Role, available: usize, required: usize },
    #[error("member ({outer}, {inner}): training scans are single-class at the target horizon")]
    SingleClassTraining { outer: usize, inner: usize },
    #[error("subject {0} is not in the split plan; internal scoring requires a training-cohort subject")]
    UnknownSubject(SubjectId),
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Risk(#[from] RiskformError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Cohort(#[from] SimError),
}

/// The training objectives the harness can fit. All of them share the same
/// encoder architecture; they differ in how the two scans of a knee interact
/// in the loss and, for the progressive forms, in the prediction itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Approach {
    /// Independent per-scan cross-entropy.
    Baseline,
    /// Baseline plus the ranking penalty on within-knee risk order.
    RiskReg,
    /// Baseline plus the contrastive penalty on penultimate representations.
    ConReg,
    /// Baseline plus both penalties.
    ConRegPlusRiskReg,
    /// Progressive form 1: scan-2 risk accumulates both scans' hazards.
    RiskForm1,
    /// Progressive form 2: scan-2 risk conditions on scan 1 through a
    /// separate gate encoder.
    RiskForm2,
}

impl Approach {
    pub const ALL: [Approach; 6] = [
        Approach::Baseline,
        Approach::RiskReg,
        Approach::ConReg,
        Approach::ConRegPlusRiskReg,
        Approach::RiskForm1,
        Approach::RiskForm2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Baseline => "baseline",
            Approach::RiskReg => "riskreg",
            Approach::ConReg => "conreg",
            Approach::ConRegPlusRiskReg => "conreg+riskreg",
            Approach::RiskForm1 => "riskform1",
            Approach::RiskForm2 => "riskform2",
        }
    }

    pub fn from_str_spelling(s: &str) -> Option<Approach> {
        Approach::ALL.into_iter().find(|a| a.as_str() == s)
    }

    fn reg_kind(self) -> Option<RegKind> {
        match self {
            Approach::RiskReg => Some(RegKind::RiskReg),
            Approach::ConReg => Some(RegKind::ConReg),
            Approach::ConRegPlusRiskReg => Some(RegKind::Both),
            _ => None,
        }
    }

    /// Whether the approach trains a second (gate) encoder.
    pub fn uses_gate(self) -> bool {
        self == Approach::RiskForm2
    }
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whose predictions an evaluation may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    /// Each subject is scored only by the members whose held-out outer fold
    /// contains it, so no scoring model ever trained or validated on it.
    Internal,
    /// All members score every subject. Only valid on data outside the
    /// training cohort; on the training cohort it is optimistically biased.
    External,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Internal => "internal",
            Scope::External => "external",
        }
    }
}

/// Subject-to-outer-fold assignment, stratified by role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    n_outer: usize,
    assignments: BTreeMap<SubjectId, usize>,
}

impl SplitPlan {
    pub fn n_outer(&self) -> usize {
        self.n_outer
    }

    pub fn n_members(&self) -> usize {
        self.n_outer * (self.n_outer - 1)
    }

    pub fn fold_of(&self, subject: &SubjectId) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    pub fn assignments(&self) -> &BTreeMap<SubjectId, usize> {
        &self.assignments
    }

    /// The outer fold member `(outer, inner)` validates on: the `inner`-th of
    /// the folds other than `outer`, in ascending fold order.
    pub fn validation_fold(&self, outer: usize, inner: usize) -> usize {
        debug_assert!(outer < self.n_outer && inner < self.n_outer - 1);
        if inner < outer {
            inner
        } else {
            inner + 1
        }
    }
}

/// Unique `(subject, role)` pairs of a cohort, in cohort order.
pub fn cohort_subjects(cohort: &Cohort) -> Vec<(SubjectId, Role)> {
    let mut out: Vec<(SubjectId, Role)> = Vec::new();
    for knee in &cohort.knees {
        if out.last().map(|(id, _)| id) != Some(&knee.subject.subject_id) {
            out.push((knee.subject.subject_id.clone(), knee.subject.role));
        }
    }
    out
}

/// Assigns subjects to `n_outer` folds, stratified by role: each shuffled
/// stratum is dealt round-robin, so per-role fold sizes differ by at most
/// one. Every fold is guaranteed at least one subject of each role.
pub fn build_split_plan(
    subjects: &[(SubjectId, Role)],
    n_outer: usize,
    master_seed: u64,
) -> Result<SplitPlan, CvError> {
    if n_outer < 3 {
        return Err(CvError::InvalidSettings(format!("need at least 3 outer folds, got {n_outer}")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (id, _) in subjects {
        if !seen.insert(id) {
            return Err(CvError::DuplicateSubject(id.clone()));
        }
    }

    let mut assignments = BTreeMap::new();
    for (stratum_ix, role) in [Role::Case, Role::Control].into_iter().enumerate() {
        let mut stratum: Vec<&SubjectId> =
            subjects.iter().filter(|(_, r)| *r == role).map(|(id, _)| id).collect();
        if stratum.len() < n_outer {
            return Err(CvError::TooFewSubjects { role, available: stratum.len(), required: n_outer });
        }
        let mut rng = seed::rng_for(master_seed, "cv.plan", &[stratum_ix as u64]);
        stratum.shuffle(&mut rng);
        for (k, id) in stratum.into_iter().enumerate() {
            assignments.insert(id.clone(), k % n_outer);
        }
    }
    Ok(SplitPlan { n_outer, assignments })
}

/// One member's subject-level split, derived from the plan. This is the
/// single source of truth the trainer uses, so auditing it audits the
/// training data selection itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberSplit {
    pub outer: usize,
    pub inner: usize,
    pub validation_fold: usize,
    pub train: Vec<SubjectId>,
    pub validation: Vec<SubjectId>,
    pub test: Vec<SubjectId>,
}

pub fn member_split(plan: &SplitPlan, outer: usize, inner: usize) -> MemberSplit {
    let validation_fold = plan.validation_fold(outer, inner);
    let mut split = MemberSplit {
        outer,
        inner,
        validation_fold,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (id, &fold) in plan.assignments() {
        if fold == outer {
            split.test.push(id.clone());
        } else if fold == validation_fold {
            split.validation.push(id.clone());
        } else {
            split.train.push(id.clone());
        }
    }
    split
}

/// Everything the harness needs to fit one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub approach: Approach,
    pub horizon: Horizon,
    pub outer_folds: usize,
    pub hidden_dims: Vec<usize>,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Knees per minibatch; a knee's scans always share a batch.
    pub batch_knees: usize,
    /// Hinge margin for the penalty approaches; ignored elsewhere.
    pub margin: f64,
    /// Penalty weight for the penalty approaches; ignored elsewhere.
    pub gamma: f64,
    pub seed: u64,
    pub threads: Threads,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), CvError> {
        if self.outer_folds < 3 {
            return Err(CvError::InvalidSettings(format!(
                "need at least 3 outer folds, got {}",
                self.outer_folds
            )));
        }
        if self.epochs == 0 {
            return Err(CvError::InvalidSettings("epochs must be at least 1".into()));
        }
        if self.batch_knees == 0 {
            return Err(CvError::InvalidSettings("batch_knees must be at least 1".into()));
        }
        if self.approach.reg_kind().is_some() {
            RegConfig { kind: RegKind::Both, margin: self.margin, gamma: self.gamma }.validate()?;
        }
        Ok(())
    }

    pub fn n_members(&self) -> usize {
        self.outer_folds * (self.outer_folds - 1)
    }
}

/// How a member's checkpoint epoch was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ValCriterion {
    /// Highest validation AUROC; ties go to the earliest epoch.
    Auroc(f64),
    /// The validation scans were single-class, so AUROC is undefined; the
    /// lowest plain head loss (no penalty) picked the epoch instead.
    LossFallback(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedMember {
    pub outer: usize,
    pub inner: usize,
    pub validation_fold: usize,
    pub best_epoch: usize,
    pub criterion: ValCriterion,
    pub f_encoder: EncoderModel,
    /// Gate encoder; present exactly for approaches that use one.
    pub g_encoder: Option<EncoderModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedBundle {
    pub approach: Approach,
    pub horizon: Horizon,
    pub seed: u64,
    pub plan: SplitPlan,
    /// Members ordered by `(outer, inner)`.
    pub members: Vec<TrainedMember>,
}

/// Fits the full nested ensemble: one member per `(outer, inner)` pair, each
/// trained independently from its own seeded streams. Members train in
/// parallel when the `parallel` feature is active and `threads != 1`; the
/// result is identical either way.
pub fn train_bundle(cohort: &Cohort, settings: &TrainSettings) -> Result<TrainedBundle, CvError> {
    settings.validate()?;
    let subjects = cohort_subjects(cohort);
    let plan = build_split_plan(&subjects, settings.outer_folds, settings.seed)?;
    let inner_folds = settings.outer_folds - 1;
    let results = exec::map_indexed(settings.n_members(), settings.threads, |i| {
        let (outer, inner) = (i / inner_folds, i % inner_folds);
        train_member(cohort, &plan, outer, inner, settings)
    });
    let members = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(TrainedBundle {
        approach: settings.approach,
        horizon: settings.horizon,
        seed: settings.seed,
        plan,
        members,
    })
}

struct MemberModels {
    approach: Approach,
    f: EncoderModel,
    g: Option<EncoderModel>,
}

impl MemberModels {
    /// Risks for a knee's scan(s): the scan-1 risk is always the plain
    /// encoder probability; the scan-2 risk is the approach's pair
    /// prediction, which for the progressive forms conditions on scan 1.
    fn knee_risks(&self, knee: &KneeRecord) -> Result<(f64, Option<f64>), CvError> {
        let l1 = self.f.logit(&knee.scan1.features)?;
        let Some(scan2) = &knee.scan2 else {
            return Ok((predict_single(l1)?.y1_hat, None));
        };
        let pred = self.pair_prediction(l1, scan2)?;
        Ok((pred.y1_hat, pred.y2_hat))
    }

    fn pair_prediction(&self, l1: f64, scan2: &crate::cohortgen::ScanRecord) -> Result<PairPrediction, CvError> {
        let pred = match self.approach {
            Approach::RiskForm1 => predict_pair_form1(l1, self.f.logit(&scan2.features)?)?,
            Approach::RiskForm2 => {
                let g = self.g.as_ref().expect("form2 members carry a gate encoder");
                predict_pair_form2(l1, g.logit(&scan2.features)?)?
            }
            _ => predict_pair_baseline(l1, self.f.logit(&scan2.features)?)?,
        };
        Ok(pred)
    }
}

fn train_member(
    cohort: &Cohort,
    plan: &SplitPlan,
    outer: usize,
    inner: usize,
    settings: &TrainSettings,
) -> Result<TrainedMember, CvError> {
    let split = member_split(plan, outer, inner);
    let in_set = |ids: &[SubjectId], knee: &KneeRecord| ids.binary_search(&knee.subject.subject_id).is_ok();
    let train_knees: Vec<&KneeRecord> =
        cohort.knees.iter().filter(|k| in_set(&split.train, k)).collect();
    let val_knees: Vec<&KneeRecord> =
        cohort.knees.iter().filter(|k| in_set(&split.validation, k)).collect();

    let horizon = settings.horizon;
    let mut has = [false, false];
    for knee in &train_knees {
        for scan in std::iter::once(&knee.scan1).chain(knee.scan2.as_ref()) {
            has[usize::from(scan.label(horizon))] = true;
        }
    }
    if !(has[0] && has[1]) {
        return Err(CvError::SingleClassTraining { outer, inner });
    }

    let encoder_config = |stream: &str| EncoderConfig {
        input_dim: cohort.feature_dim,
        hidden_dims: settings.hidden_dims.clone(),
        activation: Activation::Relu,
        seed: seed::derive_seed(settings.seed, stream, &[outer as u64, inner as u64]),
    };
    let mut models = MemberModels {
        approach: settings.approach,
        f: gradnet::init_kaiming(&encoder_config("cv.init.f"))?,
        g: if settings.approach.uses_gate() {
            Some(gradnet::init_kaiming(&encoder_config("cv.init.g"))?)
        } else {
            None
        },
    };
    let mut adam_f = AdamState::new(settings.adam, &models.f);
    let mut adam_g = models.g.as_ref().map(|g| AdamState::new(settings.adam, g));

    // The validation label composition is fixed, so the selection criterion
    // is decided once up front.
    let val_single_class = {
        let mut has = [false, false];
        for knee in &val_knees {
            for scan in std::iter::once(&knee.scan1).chain(knee.scan2.as_ref()) {
                has[usize::from(scan.label(horizon))] = true;
            }
        }
        !(has[0] && has[1])
    };

    let mut best: Option<(f64, usize, EncoderModel, Option<EncoderModel>)> = None;
    let mut order: Vec<usize> = (0..train_knees.len()).collect();
    for epoch in 0..settings.epochs {
        let mut rng =
            seed::rng_for(settings.seed, "cv.shuffle", &[outer as u64, inner as u64, epoch as u64]);
        order.shuffle(&mut rng);
        for batch in order.chunks(settings.batch_knees) {
            train_batch(&mut models, &mut adam_f, adam_g.as_mut(), batch, &train_knees, settings)?;
        }

        // Higher is better for AUROC; the fallback loss is negated so the
        // same strictly-greater comparison keeps the earliest epoch on ties.
        let score = if val_single_class {
            -validation_loss(&models, &val_knees, horizon)?
        } else {
            let records = validation_records(&models, &val_knees, horizon)?;
            metrics::auroc(&records).expect("validation set verified two-class")
        };
        if best.as_ref().is_none_or(|(s, ..)| score > *s) {
            best = Some((score, epoch, models.f.clone(), models.g.clone()));
        }
    }

    let (score, best_epoch, f_encoder, g_encoder) = best.expect("at least one epoch runs");
    Ok(TrainedMember {
        outer,
        inner,
        validation_fold: split.validation_fold,
        best_epoch,
        criterion: if val_single_class {
            ValCriterion::LossFallback(-score)
        } else {
            ValCriterion::Auroc(score)
        },
        f_encoder,
        g_encoder,
    })
}

/// One minibatch: accumulate knee losses, normalize by the number of scans in
/// the batch, and step every optimizer. The gate optimizer steps even when a
/// batch happens to contain no paired knee, so optimizer state stays aligned
/// across both encoders.
fn train_batch(
    models: &mut MemberModels,
    adam_f: &mut AdamState,
    adam_g: Option<&mut AdamState>,
    batch: &[usize],
    train_knees: &[&KneeRecord],
    settings: &TrainSettings,
) -> Result<(), CvError> {
    let mut grads_f = Gradients::zeros_like(&models.f);
    let mut grads_g = models.g.as_ref().map(Gradients::zeros_like);
    let mut n_scans = 0usize;

    for &kix in batch {
        let knee = train_knees[kix];
        n_scans += 1 + usize::from(knee.scan2.is_some());
        accumulate_knee(models, &mut grads_f, grads_g.as_mut(), knee, settings)?;
    }

    let inv = 1.0 / n_scans as f64;
    grads_f.scale(inv);
    gradnet::adam_step(adam_f, &mut models.f, &grads_f)?;
    if let (Some(adam_g), Some(mut grads_g), Some(g)) = (adam_g, grads_g, models.g.as_mut()) {
        grads_g.scale(inv);
        gradnet::adam_step(adam_g, g, &grads_g)?;
    }
    Ok(())
}

fn accumulate_knee(
    models: &MemberModels,
    grads_f: &mut Gradients,
    grads_g: Option<&mut Gradients>,
    knee: &KneeRecord,
    settings: &TrainSettings,
) -> Result<f64, CvError> {
    let horizon = settings.horizon;
    let trace1 = models.f.forward(&knee.scan1.features)?;
    let y1 = knee.scan1.label(horizon);

    let Some(scan2) = &knee.scan2 else {
        let pred = predict_single(trace1.logit)?;
        let loss = pair_loss(&pred, &PairLabels { y1, y2: None, horizon })?;
        grads_f.accumulate(&gradnet::backward(&models.f, &trace1, loss.d_logit1, None)?);
        return Ok(loss.loss);
    };
    let labels = PairLabels { y1, y2: Some(scan2.label(horizon)), horizon };

    match settings.approach {
        Approach::RiskForm1 => {
            let trace2 = models.f.forward(&scan2.features)?;
            let pred = predict_pair_form1(trace1.logit, trace2.logit)?;
            let loss = pair_loss(&pred, &labels)?;
            grads_f.accumulate(&gradnet::backward(&models.f, &trace1, loss.d_logit1, None)?);
            let d2 = loss.d_logit2.expect("pair predictions carry a scan-2 gradient");
            grads_f.accumulate(&gradnet::backward(&models.f, &trace2, d2, None)?);
            Ok(loss.loss)
        }
        Approach::RiskForm2 => {
            let g = models.g.as_ref().expect("form2 members carry a gate encoder");
            let trace2 = g.forward(&scan2.features)?;
            let pred = predict_pair_form2(trace1.logit, trace2.logit)?;
            let loss = pair_loss(&pred, &labels)?;
            grads_f.accumulate(&gradnet::backward(&models.f, &trace1, loss.d_logit1, None)?);
            let d2 = loss.d_logit2.expect("pair predictions carry a scan-2 gradient");
            let grads_g = grads_g.expect("form2 members accumulate gate gradients");
            grads_g.accumulate(&gradnet::backward(g, &trace2, d2, None)?);
            Ok(loss.loss)
        }
        approach => {
            let trace2 = models.f.forward(&scan2.features)?;
            let pred = predict_pair_baseline(trace1.logit, trace2.logit)?;
            match approach.reg_kind() {
                None => {
                    let loss = pair_loss(&pred, &labels)?;
                    grads_f.accumulate(&gradnet::backward(&models.f, &trace1, loss.d_logit1, None)?);
                    let d2 = loss.d_logit2.expect("pair predictions carry a scan-2 gradient");
                    grads_f.accumulate(&gradnet::backward(&models.f, &trace2, d2, None)?);
                    Ok(loss.loss)
                }
                Some(kind) => {
                    let config =
                        RegConfig { kind, margin: settings.margin, gamma: settings.gamma };
                    let reg = total_regularized_loss_with_reps(
                        &pred,
                        &labels,
                        &trace1.penultimate,
                        &trace2.penultimate,
                        &config,
                    )?;
                    grads_f.accumulate(&gradnet::backward(
                        &models.f,
                        &trace1,
                        reg.d_logit1,
                        Some(&reg.d_penultimate1),
                    )?);
                    grads_f.accumulate(&gradnet::backward(
                        &models.f,
                        &trace2,
                        reg.d_logit2,
                        Some(&reg.d_penultimate2),
                    )?);
                    Ok(reg.loss)
                }
            }
        }
    }
}

fn validation_records(
    models: &MemberModels,
    val_knees: &[&KneeRecord],
    horizon: Horizon,
) -> Result<Vec<(f64, bool)>, CvError> {
    let mut records = Vec::new();
    for knee in val_knees {
        let (risk1, risk2) = models.knee_risks(knee)?;
        records.push((risk1, knee.scan1.label(horizon)));
        if let (Some(risk2), Some(scan2)) = (risk2, &knee.scan2) {
            records.push((risk2, scan2.label(horizon)));
        }
    }
    Ok(records)
}

/// Mean plain head loss per scan (never any penalty), used to pick an epoch
/// when validation AUROC is undefined.
fn validation_loss(
    models: &MemberModels,
    val_knees: &[&KneeRecord],
    horizon: Horizon,
) -> Result<f64, CvError> {
    let mut total = 0.0;
    let mut n_scans = 0usize;
    for knee in val_knees {
        let trace1_logit = models.f.logit(&knee.scan1.features)?;
        let y1 = knee.scan1.label(horizon);
        let (pred, labels) = match &knee.scan2 {
            None => (predict_single(trace1_logit)?, PairLabels { y1, y2: None, horizon }),
            Some(scan2) => (
                models.pair_prediction(trace1_logit, scan2)?,
                PairLabels { y1, y2: Some(scan2.label(horizon)), horizon },
            ),
        };
        total += pair_loss(&pred, &labels)?.loss;
        n_scans += 1 + usize::from(knee.scan2.is_some());
    }
    Ok(total / n_scans as f64)
}

/// One scan's ensemble score with everything a report needs about it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub subject_id: SubjectId,
    pub knee_id: crate::cohortgen::KneeId,
    pub role: Role,
    pub scan_index: u8,
    pub klg: u8,
    pub group: GroupLabel,
    pub label: bool,
    pub risk: f64,
}

/// Scores every scan of the cohort with the ensemble: the arithmetic mean of
/// the selected members' probabilities, members always summed in `(outer,
/// inner)` order so the result is independent of the thread count.
pub fn ensemble_predict(
    bundle: &TrainedBundle,
    cohort: &Cohort,
    scope: Scope,
    threads: Threads,
) -> Result<Vec<PredictionRecord>, CvError> {
    if bundle.members.is_empty() {
        return Err(CvError::EmptyEnsemble);
    }
    let per_knee = exec::map_indexed(cohort.knees.len(), threads, |kix| {
        predict_knee(bundle, &cohort.knees[kix], scope)
    });
    let mut records = Vec::with_capacity(cohort.knees.len() * 2);
    for knee_records in per_knee {
        records.extend(knee_records?);
    }
    Ok(records)
}

fn predict_knee(
    bundle: &TrainedBundle,
    knee: &KneeRecord,
    scope: Scope,
) -> Result<Vec<PredictionRecord>, CvError> {
    let members: Vec<&TrainedMember> = match scope {
        Scope::External => bundle.members.iter().collect(),
        Scope::Internal => {
            let fold = bundle
                .plan
                .fold_of(&knee.subject.subject_id)
                .ok_or_else(|| CvError::UnknownSubject(knee.subject.subject_id.clone()))?;
            bundle.members.iter().filter(|m| m.outer == fold).collect()
        }
    };
    if members.is_empty() {
        return Err(CvError::EmptyEnsemble);
    }

    let (mut sum1, mut sum2) = (0.0, 0.0);
    for member in &members {
        let models = MemberModels {
            approach: bundle.approach,
            f: member.f_encoder.clone(),
            g: member.g_encoder.clone(),
        };
        let (risk1, risk2) = models.knee_risks(knee)?;
        sum1 += risk1;
        if let Some(risk2) = risk2 {
            sum2 += risk2;
        }
    }
    let n = members.len() as f64;
    let group = assign_group(knee, bundle.horizon)?;
    let record = |scan: &crate::cohortgen::ScanRecord, risk: f64| PredictionRecord {
        subject_id: knee.subject.subject_id.clone(),
        knee_id: knee.knee_id.clone(),
        role: knee.subject.role,
        scan_index: scan.scan_index,
        klg: scan.klg,
        group,
        label: scan.label(bundle.horizon),
        risk,
    };
    let mut out = vec![record(&knee.scan1, sum1 / n)];
    if let Some(scan2) = &knee.scan2 {
        out.push(record(scan2, sum2 / n));
    }
    Ok(out)
}

/// Progression subgroups reported alongside the headline metrics. Each
/// cohort is a union of label-pair groups; a knee contributes both scans.
pub const SUBGROUP_COHORTS: [(&str, &[GroupLabel]); 4] = [
    ("Cohort-1", &[GroupLabel::Set1]),
    ("Cohort-2", &[GroupLabel::Set1, GroupLabel::Set2]),
    ("Cohort-3", &[GroupLabel::Set1, GroupLabel::Set3]),
    ("Cohort-4", &[GroupLabel::Set2, GroupLabel::Set3]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub name: String,
    pub n_scans: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    /// Why a metric is absent, when it is.
    pub note: Option<String>,
}

/// AUROC/AUPRC inside each progression subgroup. Metrics that are undefined
/// on a subgroup (empty or single-class) are absent with the reason recorded,
/// never silently zero.
pub fn subgroup_report(records: &[PredictionRecord]) -> Vec<SubgroupRow> {
    SUBGROUP_COHORTS
        .iter()
        .map(|(name, groups)| {
            let scans: Vec<(f64, bool)> = records
                .iter()
                .filter(|r| groups.contains(&r.group))
                .map(|r| (r.risk, r.label))
                .collect();
            row_for(name, &scans)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlgRow {
    pub klg: u8,
    pub n_scans: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: Option<f64>,
    pub note: Option<String>,
}

/// AUROC within each radiographic grade, the check that the model ranks risk
/// inside strata the grade alone cannot separate.
pub fn klg_report(records: &[PredictionRecord]) -> Vec<KlgRow> {
    (0u8..=4)
        .map(|klg| {
            let scans: Vec<(f64, bool)> =
                records.iter().filter(|r| r.klg == klg).map(|r| (r.risk, r.label)).collect();
            let row = row_for("klg", &scans);
            KlgRow {
                klg,
                n_scans: row.n_scans,
                n_pos: row.n_pos,
                n_neg: row.n_neg,
                auroc: row.auroc,
                note: row.note,
            }
        })
        .collect()
}

fn row_for(name: &str, scans: &[(f64, bool)]) -> SubgroupRow {
    let n_pos = scans.iter().filter(|(_, y)| *y).count();
    let n_neg = scans.len() - n_pos;
    let (auroc, auprc, note) = if scans.is_empty() {
        (None, None, Some("no scans in this subgroup".to_string()))
    } else if n_pos == 0 || n_neg == 0 {
        (None, None, Some(format!("single-class subgroup ({n_pos} positive, {n_neg} negative)")))
    } else {
        (
            Some(metrics::auroc(scans).expect("two-class subgroup")),
            Some(metrics::auprc(scans).expect("subgroup has positives")),
            None,
        )
    };
    SubgroupRow { name: name.to_string(), n_scans: scans.len(), n_pos, n_neg, auroc, auprc, note }
}

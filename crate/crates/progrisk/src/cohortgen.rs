//! Synthetic sequential-scan cohorts with a monotone latent risk process.
//!
//! Each subject contributes one knee whose severity follows a clipped,
//! monotone path over a fixed visit grid: a uniform starting point plus a
//! log-normal progression rate plus cumulative non-negative noise. The event
//! (total replacement) fires at the first attended follow-up visit where
//! severity plus threshold noise crosses the event threshold, so risk is
//! monotone by construction. Features are a fixed random linear projection of
//! latent severity and demographics plus Gaussian noise; labels at a scan say
//! whether the event occurs within the horizon after that scan.
//!
//! Cases and controls are matched greedily one-to-one on exact age, sex, and
//! ethnicity with BMI within 10% of the case's; unmatched subjects are
//! excluded. The matched cohort serializes to a flat CSV, one row per scan,
//! in (subject_id, scan_index) order. With a fixed config and seed the CSV is
//! byte-identical across runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::riskform::Horizon;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("severity {0} outside [0, 1]")]
    SeverityOutOfRange(f64),
    #[error("knee {knee_id}: scan 1 positive but scan 2 negative at {horizon}")]
    InconsistentLabels { knee_id: KneeId, horizon: Horizon },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} row {row}: {message}")]
    Csv { path: String, row: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KneeId(pub String);

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for KneeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Case,
    Control,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Case => "case",
            Role::Control => "control",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

/// Coarse categorical ancestry group, four levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ethnicity {
    A,
    B,
    C,
    D,
}

impl Ethnicity {
    pub fn as_str(self) -> &'static str {
        match self {
            Ethnicity::A => "A",
            Ethnicity::B => "B",
            Ethnicity::C => "C",
            Ethnicity::D => "D",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: SubjectId,
    pub role: Role,
    /// Whole years, clamped into `[45, 79]` by the simulator.
    pub age: u32,
    pub sex: Sex,
    pub ethnicity: Ethnicity,
    pub bmi: f64,
}

/// Latent disease path of one knee over its attended visits.
#[derive(Debug, Clone, PartialEq)]
pub struct KneeTrajectory {
    pub knee_id: KneeId,
    /// Attended visit times in months, ascending, starting at 0.
    pub visit_times: Vec<u32>,
    /// Severity in `[0, 1]` at each attended visit; non-decreasing.
    pub severity: Vec<f64>,
    /// Latent progression rate (severity per month) driving the path.
    pub progression_rate: f64,
    /// Event time; present exactly for cases. Always one of `visit_times`.
    pub tkr_time_months: Option<u32>,
    /// Last attended visit time.
    pub followup_end_months: u32,
}

impl KneeTrajectory {
    pub fn severity_at(&self, time_months: u32) -> Option<f64> {
        self.visit_times.iter().position(|&t| t == time_months).map(|i| self.severity[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedKnee {
    pub subject: SubjectRecord,
    pub trajectory: KneeTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian noise added to every feature.
    pub noise_std: f64,
    pub visit_interval_months: u32,
    pub followup_months: u32,
    /// Probability that a scheduled follow-up visit is attended.
    pub visit_attendance: f64,
    /// Fraction of subjects whose follow-up ends early.
    pub dropout_rate: f64,
    /// Severity level the event process fires around.
    pub severity_threshold: f64,
    /// Per-visit noise on the event threshold check.
    pub threshold_noise_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_subjects: 1000,
            feature_dim: 16,
            noise_std: 0.3,
            visit_interval_months: 12,
            followup_months: 108,
            visit_attendance: 0.95,
            dropout_rate: 0.25,
            severity_threshold: 0.8,
            threshold_noise_std: 0.05,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.n_subjects == 0 {
            return fail("n_subjects must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be at least 1".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.visit_interval_months == 0 {
            return fail("visit_interval_months must be positive".into());
        }
        if self.followup_months < self.visit_interval_months {
            return fail("followup_months must cover at least one follow-up visit".into());
        }
        if !(self.visit_attendance > 0.0 && self.visit_attendance <= 1.0) {
            return fail(format!("visit_attendance must be in (0, 1], got {}", self.visit_attendance));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.severity_threshold > 0.0 && self.severity_threshold < 1.0) {
            return fail(format!("severity_threshold must be in (0, 1), got {}", self.severity_threshold));
        }
        if !(self.threshold_noise_std.is_finite() && self.threshold_noise_std >= 0.0) {
            return fail(format!("threshold_noise_std must be non-negative, got {}", self.threshold_noise_std));
        }
        Ok(())
    }
}

// Severity process parameters. The starting point, rate, and noise are scaled
// so that under the default config roughly half the subjects reach the event
// within the study window.
const SEVERITY_START_RANGE: (f64, f64) = (0.10, 0.60);
const RATE_LOG_MEAN: f64 = -5.55; // median progression ~0.0039 severity/month
const RATE_LOG_STD: f64 = 0.6;
const CUMULATIVE_NOISE_STD: f64 = 0.01;

// Demographic draws.
const AGE_MEAN: f64 = 63.0;
const AGE_STD: f64 = 8.0;
const AGE_RANGE: (u32, u32) = (45, 79);
const FEMALE_RATE: f64 = 0.58;
const ETHNICITY_WEIGHTS: [(Ethnicity, f64); 4] =
    [(Ethnicity::A, 0.78), (Ethnicity::B, 0.12), (Ethnicity::C, 0.06), (Ethnicity::D, 0.04)];
const BMI_MEAN: f64 = 29.5;
const BMI_STD: f64 = 4.5;
const BMI_RANGE: (f64, f64) = (16.0, 50.0);

// Scale of each signal component before projection. The progression rate
// appears alongside current severity: the premise of the whole exercise is
// that the scans carry prognostic signal the coarse grade does not.
const SIGNAL_SEVERITY_SCALE: f64 = 2.5;
const SIGNAL_RATE_SCALE: f64 = 1.0;
const SIGNAL_AGE_SCALE: f64 = 0.4;
const SIGNAL_SEX_SCALE: f64 = 0.3;
const SIGNAL_BMI_SCALE: f64 = 0.4;
const SIGNAL_DIM: usize = 5;

/// Simulates demographics and a severity trajectory for every subject. Each
/// subject draws from its own seeded stream, so output does not depend on
/// evaluation order.
pub fn simulate_cohort(config: &SimConfig, master_seed: u64) -> Result<Vec<SimulatedKnee>, SimError> {
    config.validate()?;
    let mut knees = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        knees.push(simulate_subject(config, master_seed, i));
    }
    Ok(knees)
}

fn simulate_subject(config: &SimConfig, master_seed: u64, index: usize) -> SimulatedKnee {
    let mut rng = seed::rng_for(master_seed, "cohortgen.subject", &[index as u64]);
    let subject_id = SubjectId(format!("S{index:05}"));
    let knee_id = KneeId(format!("{subject_id}-K1"));

    let age_draw: f64 = Normal::new(AGE_MEAN, AGE_STD).expect("valid age distribution").sample(&mut rng);
    let age = (age_draw.round() as i64).clamp(AGE_RANGE.0 as i64, AGE_RANGE.1 as i64) as u32;
    let sex = if rng.gen_bool(FEMALE_RATE) { Sex::Female } else { Sex::Male };
    let ethnicity = {
        let roll: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut picked = Ethnicity::D;
        for (eth, w) in ETHNICITY_WEIGHTS {
            acc += w;
            if roll < acc {
                picked = eth;
                break;
            }
        }
        picked
    };
    let bmi_draw: f64 = Normal::new(BMI_MEAN, BMI_STD).expect("valid bmi distribution").sample(&mut rng);
    let bmi = bmi_draw.clamp(BMI_RANGE.0, BMI_RANGE.1);

    // Follow-up horizon: most subjects stay through the full window, a
    // configurable fraction stops at a uniformly chosen earlier visit.
    let interval = config.visit_interval_months;
    let last_scheduled = config.followup_months / interval * interval;
    let followup_cap = if rng.gen_bool(config.dropout_rate) && last_scheduled > interval {
        interval * rng.gen_range(1..last_scheduled / interval)
    } else {
        last_scheduled
    };

    let start = rng.gen_range(SEVERITY_START_RANGE.0..SEVERITY_START_RANGE.1);
    let rate = LogNormal::new(RATE_LOG_MEAN, RATE_LOG_STD).expect("valid rate distribution").sample(&mut rng);
    let cum_noise_dist = Normal::new(0.0, CUMULATIVE_NOISE_STD).expect("valid noise distribution");
    let threshold_noise_dist = Normal::new(0.0, config.threshold_noise_std.max(f64::MIN_POSITIVE))
        .expect("valid threshold noise distribution");

    let mut visit_times = vec![0u32];
    let mut severity = vec![(start as f64).clamp(0.0, 1.0)];
    let mut cum_noise = 0.0;
    let mut tkr_time = None;
    let mut t = interval;
    while t <= followup_cap {
        // Draw both visit-level randoms unconditionally so the stream layout
        // is fixed regardless of attendance.
        let attended = rng.gen_bool(config.visit_attendance);
        let noise_step: f64 = cum_noise_dist.sample(&mut rng);
        let threshold_noise: f64 = threshold_noise_dist.sample(&mut rng);
        cum_noise += noise_step.abs();
        if attended {
            let s = (start + rate * t as f64 + cum_noise).clamp(0.0, 1.0);
            visit_times.push(t);
            severity.push(s);
            // The event decision happens at follow-up visits, never at the
            // baseline scan. The noise is truncated at three sigma so a
            // sufficiently damaged knee always proceeds to replacement --
            // severities far above the threshold cannot survive indefinitely.
            let clamped_noise = if config.threshold_noise_std > 0.0 {
                threshold_noise.clamp(-3.0 * config.threshold_noise_std, 3.0 * config.threshold_noise_std)
            } else {
                0.0
            };
            if s + clamped_noise > config.severity_threshold {
                tkr_time = Some(t);
                break;
            }
        }
        t += interval;
    }

    let role = if tkr_time.is_some() { Role::Case } else { Role::Control };
    let followup_end = *visit_times.last().expect("baseline visit always present");
    SimulatedKnee {
        subject: SubjectRecord { subject_id, role, age, sex, ethnicity, bmi },
        trajectory: KneeTrajectory {
            knee_id,
            visit_times,
            severity,
            progression_rate: rate,
            tkr_time_months: tkr_time,
            followup_end_months: followup_end,
        },
    }
}

/// Scan times chosen for one knee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanSelection {
    pub scan1_time: u32,
    pub scan2_time: Option<u32>,
}

/// Minimum and maximum lead time (months before the event) for a case's
/// second scan, and the follow-up a control must still have ahead of its
/// second scan.
pub const CASE_SCAN2_MIN_LEAD_MONTHS: u32 = 12;
pub const CASE_SCAN2_MAX_LEAD_MONTHS: u32 = 48;
pub const CONTROL_SCAN2_RESIDUAL_MONTHS: u32 = 48;

/// Picks the knee's scans. Scan 1 is always the baseline visit. For a case,
/// scan 2 is the latest attended visit between 48 and 12 months before the
/// event; for a control, the latest attended visit still followed by at
/// least 48 months of observation. Scan 2 must differ from scan 1; when no
/// visit qualifies the knee is single-scan.
pub fn select_scans(trajectory: &KneeTrajectory) -> ScanSelection {
    let scan1_time = trajectory.visit_times[0];
    let candidate = match trajectory.tkr_time_months {
        Some(tkr) => {
            let lo = tkr.saturating_sub(CASE_SCAN2_MAX_LEAD_MONTHS);
            let hi = tkr.saturating_sub(CASE_SCAN2_MIN_LEAD_MONTHS);
            trajectory
                .visit_times
                .iter()
                .copied()
                .filter(|&t| t > scan1_time && t >= lo && t <= hi)
                .max()
        }
        None => trajectory
            .visit_times
            .iter()
            .copied()
            .filter(|&t| {
                t > scan1_time && trajectory.followup_end_months - t >= CONTROL_SCAN2_RESIDUAL_MONTHS
            })
            .max(),
    };
    ScanSelection { scan1_time, scan2_time: candidate }
}

/// Event label at a scan: does the event fall within `horizon` after it?
pub fn label_within(scan_time: u32, tkr_time: Option<u32>, horizon: Horizon) -> bool {
    match tkr_time {
        Some(tkr) => tkr > scan_time && tkr <= scan_time + horizon.months(),
        None => false,
    }
}

/// Kellgren-Lawrence-style grade from severity: bins at 0.2, 0.4, 0.6, 0.8,
/// upper edge inclusive, so 0.2 maps to grade 0 and 1.0 to grade 4.
pub fn assign_klg(severity: f64) -> Result<u8, SimError> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(SimError::SeverityOutOfRange(severity));
    }
    Ok(match severity {
        s if s <= 0.2 => 0,
        s if s <= 0.4 => 1,
        s if s <= 0.6 => 2,
        s if s <= 0.8 => 3,
        _ => 4,
    })
}

/// True when `control` is an acceptable match for `case`: identical age,
/// sex, and ethnicity, and BMI within 10% of the case's.
pub fn is_match(case: &SubjectRecord, control: &SubjectRecord) -> bool {
    case.age == control.age
        && case.sex == control.sex
        && case.ethnicity == control.ethnicity
        && (case.bmi - control.bmi).abs() <= 0.10 * case.bmi
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    /// `(case, control)` subject-id pairs.
    pub pairs: Vec<(SubjectId, SubjectId)>,
    pub unmatched_cases: Vec<SubjectId>,
    pub unmatched_controls: Vec<SubjectId>,
}

/// Greedy one-to-one matching: cases in input order each claim the first
/// still-unclaimed compatible control in input order. Deterministic in the
/// input order; no randomness involved.
pub fn match_case_control(subjects: &[SubjectRecord]) -> MatchOutcome {
    let cases: Vec<&SubjectRecord> = subjects.iter().filter(|s| s.role == Role::Case).collect();
    let controls: Vec<&SubjectRecord> = subjects.iter().filter(|s| s.role == Role::Control).collect();
    let mut taken = vec![false; controls.len()];
    let mut pairs = Vec::new();
    let mut unmatched_cases = Vec::new();
    for case in &cases {
        let found = controls
            .iter()
            .enumerate()
            .find(|(ci, control)| !taken[*ci] && is_match(case, control));
        match found {
            Some((ci, control)) => {
                taken[ci] = true;
                pairs.push((case.subject_id.clone(), control.subject_id.clone()));
            }
            None => unmatched_cases.push(case.subject_id.clone()),
        }
    }
    let unmatched_controls = controls
        .iter()
        .zip(&taken)
        .filter(|(_, &t)| !t)
        .map(|(c, _)| c.subject_id.clone())
        .collect();
    MatchOutcome { pairs, unmatched_cases, unmatched_controls }
}

/// One imaging visit of a matched knee, with features and horizon labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    /// 1 for the baseline scan, 2 for the follow-up scan.
    pub scan_index: u8,
    pub time_months: u32,
    pub klg: u8,
    /// Event labels at the 1-, 2-, and 4-year horizons.
    pub labels: [bool; 3],
    pub features: Vec<f64>,
}

impl ScanRecord {
    pub fn label(&self, horizon: Horizon) -> bool {
        match horizon {
            Horizon::OneYear => self.labels[0],
            Horizon::TwoYear => self.labels[1],
            Horizon::FourYear => self.labels[2],
        }
    }
}

/// A matched knee with its selected scan(s).
#[derive(Debug, Clone, PartialEq)]
pub struct KneeRecord {
    pub knee_id: KneeId,
    pub subject: SubjectRecord,
    pub scan1: ScanRecord,
    pub scan2: Option<ScanRecord>,
}

/// Progression group of a paired knee at one horizon, defined purely by the
/// two scan labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupLabel {
    /// Scan 1 negative, scan 2 positive: progression is visible in the pair.
    Set1,
    /// Both scans negative.
    Set2,
    /// Both scans positive.
    Set3,
    /// Single-scan knee; group analyses skip it.
    NotApplicable,
}

impl GroupLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::Set1 => "Set1",
            GroupLabel::Set2 => "Set2",
            GroupLabel::Set3 => "Set3",
            GroupLabel::NotApplicable => "n/a",
        }
    }
}

/// Label-pair group of the knee at a horizon. A positive first scan with a
/// negative second scan cannot arise from an absorbing event and is reported
/// as an internal inconsistency.
pub fn assign_group(knee: &KneeRecord, horizon: Horizon) -> Result<GroupLabel, SimError> {
    let Some(scan2) = &knee.scan2 else {
        return Ok(GroupLabel::NotApplicable);
    };
    match (knee.scan1.label(horizon), scan2.label(horizon)) {
        (false, true) => Ok(GroupLabel::Set1),
        (false, false) => Ok(GroupLabel::Set2),
        (true, true) => Ok(GroupLabel::Set3),
        (true, false) => {
            Err(SimError::InconsistentLabels { knee_id: knee.knee_id.clone(), horizon })
        }
    }
}

/// The matched, labeled cohort: the unit the trainer and evaluator consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub knees: Vec<KneeRecord>,
    pub feature_dim: usize,
}

pub(crate) struct FeatureProjection {
    /// Row-major `feature_dim x SIGNAL_DIM`.
    weights: Vec<f64>,
    feature_dim: usize,
}

impl FeatureProjection {
    pub(crate) fn draw(master_seed: u64, feature_dim: usize) -> Self {
        let mut rng = seed::rng_for(master_seed, "cohortgen.projection", &[]);
        let dist = Normal::new(0.0, 1.0 / (SIGNAL_DIM as f64).sqrt()).expect("valid projection distribution");
        let weights = (0..feature_dim * SIGNAL_DIM).map(|_| dist.sample(&mut rng)).collect();
        FeatureProjection { weights, feature_dim }
    }

    pub(crate) fn project(&self, signal: &[f64; SIGNAL_DIM]) -> Vec<f64> {
        (0..self.feature_dim)
            .map(|row| {
                let w = &self.weights[row * SIGNAL_DIM..(row + 1) * SIGNAL_DIM];
                w.iter().zip(signal).map(|(wi, si)| wi * si).sum()
            })
            .collect()
    }
}

pub(crate) fn scan_signal(severity: f64, rate: f64, subject: &SubjectRecord) -> [f64; SIGNAL_DIM] {
    [
        SIGNAL_SEVERITY_SCALE * severity,
        SIGNAL_RATE_SCALE * (rate.ln() - RATE_LOG_MEAN) / RATE_LOG_STD,
        SIGNAL_AGE_SCALE * (subject.age as f64 - AGE_MEAN) / AGE_STD,
        SIGNAL_SEX_SCALE * if subject.sex == Sex::Female { 0.5 } else { -0.5 },
        SIGNAL_BMI_SCALE * (subject.bmi - BMI_MEAN) / BMI_STD,
    ]
}

/// Full generation pipeline: simulate, match, select scans, label, project
/// features. Only matched subjects appear in the result, ordered by subject
/// id.
pub fn assemble_cohort(config: &SimConfig, master_seed: u64) -> Result<Cohort, SimError> {
    let simulated = simulate_cohort(config, master_seed)?;
    let subjects: Vec<SubjectRecord> = simulated.iter().map(|k| k.subject.clone()).collect();
    let outcome = match_case_control(&subjects);

    let mut matched: Vec<&SubjectId> = Vec::with_capacity(outcome.pairs.len() * 2);
    for (case, control) in &outcome.pairs {
        matched.push(case);
        matched.push(control);
    }
    matched.sort();

    let by_id: BTreeMap<&SubjectId, &SimulatedKnee> =
        simulated.iter().map(|k| (&k.subject.subject_id, k)).collect();
    let projection = FeatureProjection::draw(master_seed, config.feature_dim);

    let mut knees = Vec::with_capacity(matched.len());
    for subject_id in matched {
        let sim = by_id[subject_id];
        knees.push(build_knee_record(config, master_seed, sim, &projection)?);
    }
    Ok(Cohort { knees, feature_dim: config.feature_dim })
}

fn build_knee_record(
    config: &SimConfig,
    master_seed: u64,
    sim: &SimulatedKnee,
    projection: &FeatureProjection,
) -> Result<KneeRecord, SimError> {
    let selection = select_scans(&sim.trajectory);
    let scan1 = build_scan_record(config, master_seed, sim, projection, selection.scan1_time, 1)?;
    let scan2 = selection
        .scan2_time
        .map(|t| build_scan_record(config, master_seed, sim, projection, t, 2))
        .transpose()?;
    Ok(KneeRecord { knee_id: sim.trajectory.knee_id.clone(), subject: sim.subject.clone(), scan1, scan2 })
}

fn build_scan_record(
    config: &SimConfig,
    master_seed: u64,
    sim: &SimulatedKnee,
    projection: &FeatureProjection,
    time_months: u32,
    scan_index: u8,
) -> Result<ScanRecord, SimError> {
    let severity = sim
        .trajectory
        .severity_at(time_months)
        .expect("selected scans are attended visits");
    let klg = assign_klg(severity)?;
    let mut features =
        projection.project(&scan_signal(severity, sim.trajectory.progression_rate, &sim.subject));
    if config.noise_std > 0.0 {
        let mut rng = seed::rng_for(
            master_seed,
            "cohortgen.features",
            &[fnv_id(&sim.subject.subject_id.0), scan_index as u64],
        );
        let dist = Normal::new(0.0, config.noise_std).expect("valid feature noise distribution");
        for f in &mut features {
            *f += dist.sample(&mut rng);
        }
    }
    let tkr = sim.trajectory.tkr_time_months;
    let labels = [
        label_within(time_months, tkr, Horizon::OneYear),
        label_within(time_months, tkr, Horizon::TwoYear),
        label_within(time_months, tkr, Horizon::FourYear),
    ];
    Ok(ScanRecord { scan_index, time_months, klg, labels, features })
}

fn fnv_id(s: &str) -> u64 {
    // Subject ids are unique strings; fold them into the seed indices.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counts reported after generation and by the CLI summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_knees: usize,
    pub n_cases: usize,
    pub n_controls: usize,
    pub n_paired: usize,
    pub n_single_scan: usize,
    pub n_scans: usize,
    /// `(set1, set2, set3, not_applicable)` per horizon, in horizon order.
    pub group_sizes: Vec<(String, [usize; 4])>,
}

pub fn summarize(cohort: &Cohort) -> Result<CohortSummary, SimError> {
    let mut summary = CohortSummary {
        n_knees: cohort.knees.len(),
        n_cases: cohort.knees.iter().filter(|k| k.subject.role == Role::Case).count(),
        n_controls: cohort.knees.iter().filter(|k| k.subject.role == Role::Control).count(),
        n_paired: cohort.knees.iter().filter(|k| k.scan2.is_some()).count(),
        n_single_scan: cohort.knees.iter().filter(|k| k.scan2.is_none()).count(),
        n_scans: cohort.knees.iter().map(|k| 1 + usize::from(k.scan2.is_some())).sum(),
        group_sizes: Vec::new(),
    };
    for horizon in Horizon::ALL {
        let mut counts = [0usize; 4];
        for knee in &cohort.knees {
            let ix = match assign_group(knee, horizon)? {
                GroupLabel::Set1 => 0,
                GroupLabel::Set2 => 1,
                GroupLabel::Set3 => 2,
                GroupLabel::NotApplicable => 3,
            };
            counts[ix] += 1;
        }
        summary.group_sizes.push((horizon.to_string(), counts));
    }
    Ok(summary)
}

const FIXED_COLUMNS: [&str; 13] = [
    "subject_id",
    "knee_id",
    "role",
    "age",
    "sex",
    "ethnicity",
    "bmi",
    "scan_index",
    "scan_time_months",
    "klg",
    "y_1yr",
    "y_2yr",
    "y_4yr",
];

/// Writes the cohort as CSV, one row per scan, rows ordered by
/// `(subject_id, scan_index)`. Floats use the shortest representation that
/// round-trips, so identical cohorts produce byte-identical files.
pub fn write_cohort_csv(cohort: &Cohort, path: &Path) -> Result<(), SimError> {
    let mut out = String::new();
    out.push_str(&FIXED_COLUMNS.join(","));
    for i in 0..cohort.feature_dim {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for knee in &cohort.knees {
        write_scan_row(&mut out, knee, &knee.scan1);
        if let Some(scan2) = &knee.scan2 {
            write_scan_row(&mut out, knee, scan2);
        }
    }
    fs::write(path, out).map_err(|source| SimError::Io { path: path.display().to_string(), source })
}

fn write_scan_row(out: &mut String, knee: &KneeRecord, scan: &ScanRecord) {
    let s = &knee.subject;
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        s.subject_id,
        knee.knee_id,
        s.role.as_str(),
        s.age,
        s.sex.as_str(),
        s.ethnicity.as_str(),
        s.bmi,
        scan.scan_index,
        scan.time_months,
        scan.klg,
        u8::from(scan.labels[0]),
        u8::from(scan.labels[1]),
        u8::from(scan.labels[2]),
    ));
    for f in &scan.features {
        out.push(',');
        out.push_str(&format!("{f}"));
    }
    out.push('\n');
}

/// Reads a cohort CSV back, validating the header, every field, and the
/// per-knee structure (scan 1 first, consistent demographics, nested labels).
/// Errors cite the one-based row number and the offending column.
pub fn read_cohort_csv(path: &Path) -> Result<Cohort, SimError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| SimError::Io { path: display.clone(), source })?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| SimError::Csv { path: display.clone(), row: 1, message: "empty file".into() })?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() <= FIXED_COLUMNS.len() {
        return Err(SimError::Csv {
            path: display,
            row: 1,
            message: format!("expected at least {} columns, found {}", FIXED_COLUMNS.len() + 1, columns.len()),
        });
    }
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if columns[i] != *expected {
            return Err(SimError::Csv {
                path: display,
                row: 1,
                message: format!("column {} must be {expected}, found {}", i + 1, columns[i]),
            });
        }
    }
    let feature_dim = columns.len() - FIXED_COLUMNS.len();
    for (i, name) in columns[FIXED_COLUMNS.len()..].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(SimError::Csv {
                path: display,
                row: 1,
                message: format!("feature column {} must be f{i}, found {name}", FIXED_COLUMNS.len() + i + 1),
            });
        }
    }

    struct ParsedRow {
        row: usize,
        subject: SubjectRecord,
        knee_id: KneeId,
        scan: ScanRecord,
    }

    let mut rows: Vec<ParsedRow> = Vec::new();
    for (ix, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = ix + 1;
        let err = |column: &str, message: String| SimError::Csv {
            path: display.clone(),
            row,
            message: format!("column {column}: {message}"),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(SimError::Csv {
                path: display.clone(),
                row,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let role = match fields[2] {
            "case" => Role::Case,
            "control" => Role::Control,
            other => return Err(err("role", format!("unknown role {other:?}"))),
        };
        let age: u32 = fields[3].parse().map_err(|_| err("age", format!("invalid integer {:?}", fields[3])))?;
        let sex = match fields[4] {
            "F" => Sex::Female,
            "M" => Sex::Male,
            other => return Err(err("sex", format!("unknown sex {other:?}"))),
        };
        let ethnicity = match fields[5] {
            "A" => Ethnicity::A,
            "B" => Ethnicity::B,
            "C" => Ethnicity::C,
            "D" => Ethnicity::D,
            other => return Err(err("ethnicity", format!("unknown ethnicity {other:?}"))),
        };
        let bmi: f64 = fields[6].parse().map_err(|_| err("bmi", format!("invalid number {:?}", fields[6])))?;
        if !bmi.is_finite() || bmi <= 0.0 {
            return Err(err("bmi", format!("must be positive and finite, got {bmi}")));
        }
        let scan_index: u8 =
            fields[7].parse().map_err(|_| err("scan_index", format!("invalid integer {:?}", fields[7])))?;
        if scan_index != 1 && scan_index != 2 {
            return Err(err("scan_index", format!("must be 1 or 2, got {scan_index}")));
        }
        let time_months: u32 = fields[8]
            .parse()
            .map_err(|_| err("scan_time_months", format!("invalid integer {:?}", fields[8])))?;
        let klg: u8 = fields[9].parse().map_err(|_| err("klg", format!("invalid integer {:?}", fields[9])))?;
        if klg > 4 {
            return Err(err("klg", format!("must be 0..=4, got {klg}")));
        }
        let mut labels = [false; 3];
        for (li, col) in ["y_1yr", "y_2yr", "y_4yr"].iter().enumerate() {
            labels[li] = match fields[10 + li] {
                "0" => false,
                "1" => true,
                other => return Err(err(col, format!("must be 0 or 1, got {other:?}"))),
            };
        }
        if (labels[0] && !labels[1]) || (labels[1] && !labels[2]) {
            return Err(err("y_1yr", "labels must be nested across horizons".into()));
        }
        let mut features = Vec::with_capacity(feature_dim);
        for (fi, field) in fields[FIXED_COLUMNS.len()..].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| err(&format!("f{fi}"), format!("invalid number {field:?}")))?;
            if !v.is_finite() {
                return Err(err(&format!("f{fi}"), format!("must be finite, got {v}")));
            }
            features.push(v);
        }
        rows.push(ParsedRow {
            row,
            subject: SubjectRecord {
                subject_id: SubjectId(fields[0].to_string()),
                role,
                age,
                sex,
                ethnicity,
                bmi,
            },
            knee_id: KneeId(fields[1].to_string()),
            scan: ScanRecord { scan_index, time_months, klg, labels, features },
        });
    }

    // Group consecutive rows by knee id; a knee appearing twice
    // non-consecutively indicates a corrupted file.
    let mut knees: Vec<KneeRecord> = Vec::new();
    let mut seen: std::collections::BTreeSet<KneeId> = std::collections::BTreeSet::new();
    let mut i = 0;
    while i < rows.len() {
        let first = &rows[i];
        if seen.contains(&first.knee_id) {
            return Err(SimError::Csv {
                path: display.clone(),
                row: first.row,
                message: format!("knee {} appears in non-consecutive rows", first.knee_id),
            });
        }
        seen.insert(first.knee_id.clone());
        if first.scan.scan_index != 1 {
            return Err(SimError::Csv {
                path: display.clone(),
                row: first.row,
                message: format!("knee {} must start with scan_index 1", first.knee_id),
            });
        }
        let mut knee = KneeRecord {
            knee_id: first.knee_id.clone(),
            subject: first.subject.clone(),
            scan1: first.scan.clone(),
            scan2: None,
        };
        if i + 1 < rows.len() && rows[i + 1].knee_id == first.knee_id {
            let second = &rows[i + 1];
            if second.scan.scan_index != 2 {
                return Err(SimError::Csv {
                    path: display.clone(),
                    row: second.row,
                    message: format!("knee {} has a duplicate scan_index", first.knee_id),
                });
            }
            if second.subject != first.subject {
                return Err(SimError::Csv {
                    path: display.clone(),
                    row: second.row,
                    message: format!("knee {} changes subject fields between scans", first.knee_id),
                });
            }
            if second.scan.time_months <= first.scan.time_months {
                return Err(SimError::Csv {
                    path: display.clone(),
                    row: second.row,
                    message: format!("knee {} scan times must increase", first.knee_id),
                });
            }
            knee.scan2 = Some(second.scan.clone());
            i += 1;
        }
        if knee.scan1.features.len() != feature_dim
            || knee.scan2.as_ref().is_some_and(|s| s.features.len() != feature_dim)
        {
            return Err(SimError::Csv {
                path: display.clone(),
                row: first.row,
                message: "inconsistent feature count".into(),
            });
        }
        knees.push(knee);
        i += 1;
    }
    if knees.is_empty() {
        return Err(SimError::Csv { path: display, row: 1, message: "no scan rows".into() });
    }
    Ok(Cohort { knees, feature_dim })
}

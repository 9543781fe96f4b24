//! End-to-end run drivers: simulate, train, evaluate, report.
//!
//! The CLI binary is a thin argument parser over these functions, and the
//! integration suite calls them directly. Every artifact a driver writes
//! embeds the resolved configuration (verbatim text plus its SHA-256), no
//! artifact contains a timestamp or any other nondeterministic field, and a
//! rerun with the same config reproduces every byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohortgen::{self, CohortSummary, SimError};
use crate::config::{ConfigError, RunConfig};
use crate::cvharness::{self, Approach, CvError, Scope, SplitPlan, TrainedBundle, TrainedMember, ValCriterion};
use crate::gradnet::{self, ModelError};
use crate::metrics::{self, MetricError, MetricKind};
use crate::report::{self, DelongComparison, EvaluationReport, MainMetrics, ReportError, REPORT_SCHEMA_VERSION};
use crate::riskform::Horizon;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cv(#[from] CvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("reference bundle {path}: {message}")]
    Reference { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl PipelineError {
    /// Process exit code class: 1 usage/config error, 2 data error,
    /// 3 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Sim(e) => match e {
                SimError::InvalidConfig(_) => 1,
                _ => 2,
            },
            PipelineError::Cv(e) => match e {
                CvError::InvalidSettings(_) => 1,
                CvError::Model(m) => model_exit_code(m),
                CvError::Risk(_) | CvError::Reg(_) => 3,
                CvError::Cohort(SimError::InvalidConfig(_)) => 1,
                _ => 2,
            },
            PipelineError::Model(m) => model_exit_code(m),
            PipelineError::Metric(e) => match e {
                MetricError::InvalidParams(_) => 1,
                _ => 2,
            },
            PipelineError::Report(_) => 2,
            PipelineError::Manifest { .. } | PipelineError::Reference { .. } => 2,
            PipelineError::Io { .. } => 2,
            PipelineError::Internal(_) => 3,
        }
    }
}

/// Unreadable or mismatched checkpoint files are bad data; everything else a
/// model can complain about is a bug in the caller.
fn model_exit_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Checkpoint { .. } | ModelError::CheckpointVersion { .. } => 2,
        _ => 3,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(io_err(path))
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serialization is infallible");
    text.push('\n');
    text
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Path of the config sidecar written next to the cohort CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.config", csv_path.display()))
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub csv_path: PathBuf,
    pub summary: CohortSummary,
}

/// Simulates the cohort and writes the CSV plus a `.config` sidecar holding
/// the resolved configuration.
pub fn run_simulate(config: &RunConfig) -> Result<SimulateOutcome, PipelineError> {
    let cohort = cohortgen::assemble_cohort(&config.cohort, config.seed)?;
    let csv_path = PathBuf::from(&config.cohort_csv);
    ensure_parent(&csv_path)?;
    cohortgen::write_cohort_csv(&cohort, &csv_path)?;
    write_text(&sidecar_path(&csv_path), &config.canonical_text())?;
    let summary = cohortgen::summarize(&cohort)?;
    Ok(SimulateOutcome { csv_path, summary })
}

/// One member's row in the bundle manifest; checkpoint paths are relative to
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub outer: usize,
    pub inner: usize,
    pub validation_fold: usize,
    pub best_epoch: usize,
    pub criterion: String,
    pub criterion_value: f64,
    pub f_checkpoint: String,
    pub g_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub approach: String,
    pub horizon_years: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub config_text: String,
    pub split_plan: SplitPlan,
    pub members: Vec<ManifestMember>,
}

fn criterion_parts(criterion: &ValCriterion) -> (&'static str, f64) {
    match criterion {
        ValCriterion::Auroc(v) => ("auroc", *v),
        ValCriterion::LossFallback(v) => ("loss_fallback", *v),
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub manifest_path: PathBuf,
    /// SHA-256 of the manifest bytes; identical configs produce identical
    /// hashes.
    pub manifest_sha256: String,
    /// Members whose validation fold was single-class, selected by loss
    /// instead of AUROC. The run proceeds; callers log these.
    pub fallback_members: Vec<(usize, usize)>,
}

/// Reads the cohort CSV, trains the full 42-member bundle, and writes the
/// bundle directory: `manifest.json` plus one checkpoint file per encoder
/// under `members/`.
pub fn run_train(config: &RunConfig) -> Result<TrainOutcome, PipelineError> {
    let cohort = cohortgen::read_cohort_csv(Path::new(&config.cohort_csv))?;
    let bundle = cvharness::train_bundle(&cohort, &config.train_settings())?;
    write_bundle(&bundle, config)
}

pub fn write_bundle(bundle: &TrainedBundle, config: &RunConfig) -> Result<TrainOutcome, PipelineError> {
    let dir = PathBuf::from(&config.bundle_dir);
    fs::create_dir_all(dir.join("members")).map_err(io_err(&dir))?;
    let mut members = Vec::with_capacity(bundle.members.len());
    let mut fallback_members = Vec::new();
    for m in &bundle.members {
        let f_checkpoint = format!("members/m_{}_{}.f.json", m.outer, m.inner);
        gradnet::save_checkpoint(&m.f_encoder, &dir.join(&f_checkpoint))?;
        let g_checkpoint = match &m.g_encoder {
            Some(g) => {
                let rel = format!("members/m_{}_{}.g.json", m.outer, m.inner);
                gradnet::save_checkpoint(g, &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let (criterion, criterion_value) = criterion_parts(&m.criterion);
        if matches!(m.criterion, ValCriterion::LossFallback(_)) {
            fallback_members.push((m.outer, m.inner));
        }
        members.push(ManifestMember {
            outer: m.outer,
            inner: m.inner,
            validation_fold: m.validation_fold,
            best_epoch: m.best_epoch,
            criterion: criterion.to_string(),
            criterion_value,
            f_checkpoint,
            g_checkpoint,
        });
    }
    let manifest = BundleManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        approach: bundle.approach.as_str().to_string(),
        horizon_years: bundle.horizon.years(),
        seed: bundle.seed,
        config_sha256: config.sha256(),
        config_text: config.canonical_text(),
        split_plan: bundle.plan.clone(),
        members,
    };
    let json = to_pretty(&manifest);
    let manifest_path = dir.join("manifest.json");
    write_text(&manifest_path, &json)?;
    Ok(TrainOutcome {
        manifest_path,
        manifest_sha256: sha256_hex(json.as_bytes()),
        fallback_members,
    })
}

fn manifest_err(path: &Path, message: impl Into<String>) -> PipelineError {
    PipelineError::Manifest { path: path.display().to_string(), message: message.into() }
}

/// Loads a bundle back from its manifest, restoring every member checkpoint.
/// The result is identical to the bundle that was written.
pub fn load_bundle(manifest_path: &Path) -> Result<(TrainedBundle, BundleManifest), PipelineError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| manifest_err(manifest_path, e.to_string()))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(manifest_err(
            manifest_path,
            format!(
                "schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                manifest.schema_version
            ),
        ));
    }
    let approach = Approach::from_str_spelling(&manifest.approach)
        .ok_or_else(|| manifest_err(manifest_path, format!("unknown approach {:?}", manifest.approach)))?;
    let horizon = Horizon::from_years(manifest.horizon_years)
        .ok_or_else(|| manifest_err(manifest_path, format!("invalid horizon {} years", manifest.horizon_years)))?;
    let plan = manifest.split_plan.clone();
    if manifest.members.len() != plan.n_members() {
        return Err(manifest_err(
            manifest_path,
            format!("expected {} members, found {}", plan.n_members(), manifest.members.len()),
        ));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    let inner_folds = plan.n_outer() - 1;
    let mut members = Vec::with_capacity(manifest.members.len());
    for (i, m) in manifest.members.iter().enumerate() {
        let (expect_outer, expect_inner) = (i / inner_folds, i % inner_folds);
        if (m.outer, m.inner) != (expect_outer, expect_inner) {
            return Err(manifest_err(
                manifest_path,
                format!(
                    "member {i} has coordinates ({}, {}), expected ({expect_outer}, {expect_inner})",
                    m.outer, m.inner
                ),
            ));
        }
        if m.validation_fold != plan.validation_fold(m.outer, m.inner) {
            return Err(manifest_err(
                manifest_path,
                format!("member ({}, {}) lists validation fold {}", m.outer, m.inner, m.validation_fold),
            ));
        }
        let criterion = match m.criterion.as_str() {
            "auroc" => ValCriterion::Auroc(m.criterion_value),
            "loss_fallback" => ValCriterion::LossFallback(m.criterion_value),
            other => {
                return Err(manifest_err(
                    manifest_path,
                    format!("member ({}, {}) has unknown criterion {other:?}", m.outer, m.inner),
                ))
            }
        };
        let f_encoder = gradnet::load_checkpoint(&base.join(&m.f_checkpoint))?;
        let g_encoder = match (&m.g_checkpoint, approach.uses_gate()) {
            (Some(rel), true) => Some(gradnet::load_checkpoint(&base.join(rel))?),
            (None, false) => None,
            (got, _) => {
                return Err(manifest_err(
                    manifest_path,
                    format!(
                        "member ({}, {}): gate checkpoint {} for approach {approach}",
                        m.outer,
                        m.inner,
                        if got.is_some() { "present" } else { "missing" }
                    ),
                ))
            }
        };
        members.push(TrainedMember {
            outer: m.outer,
            inner: m.inner,
            validation_fold: m.validation_fold,
            best_epoch: m.best_epoch,
            criterion,
            f_encoder,
            g_encoder,
        });
    }
    let bundle = TrainedBundle { approach, horizon, seed: manifest.seed, plan, members };
    Ok((bundle, manifest))
}

/// Scores the cohort with the bundle in `config.bundle_dir`, computes the
/// headline metrics with bootstrap intervals plus the subgroup and per-grade
/// breakdowns, optionally runs the paired AUROC test against a reference
/// bundle, and writes the report JSON to `config.report_path`.
pub fn run_evaluate(
    config: &RunConfig,
    scope: Scope,
    reference: Option<&Path>,
) -> Result<EvaluationReport, PipelineError> {
    let manifest_path = Path::new(&config.bundle_dir).join("manifest.json");
    let (bundle, manifest) = load_bundle(&manifest_path)?;
    let cohort = cohortgen::read_cohort_csv(Path::new(&config.cohort_csv))?;
    let records = cvharness::ensemble_predict(&bundle, &cohort, scope, config.threads)?;
    let scored: Vec<(f64, bool)> = records.iter().map(|r| (r.risk, r.label)).collect();
    let n_pos = scored.iter().filter(|(_, y)| *y).count();

    let params = config.bootstrap_params();
    let main = MainMetrics {
        n_scans: scored.len(),
        n_pos,
        n_neg: scored.len() - n_pos,
        auroc: metrics::auroc(&scored)?,
        auroc_ci: metrics::bootstrap_ci(&scored, MetricKind::Auroc, &params)?.into(),
        auprc: metrics::auprc(&scored)?,
        auprc_ci: metrics::bootstrap_ci(&scored, MetricKind::Auprc, &params)?.into(),
    };

    let delong_vs_reference = match reference {
        Some(ref_path) => {
            let (ref_bundle, ref_manifest) = load_bundle(ref_path)?;
            if ref_bundle.horizon != bundle.horizon {
                return Err(PipelineError::Reference {
                    path: ref_path.display().to_string(),
                    message: format!(
                        "reference horizon is {} but the evaluated bundle uses {}",
                        ref_bundle.horizon, bundle.horizon
                    ),
                });
            }
            let ref_records = cvharness::ensemble_predict(&ref_bundle, &cohort, scope, config.threads)?;
            let aligned = records.len() == ref_records.len()
                && records
                    .iter()
                    .zip(&ref_records)
                    .all(|(a, b)| a.knee_id == b.knee_id && a.scan_index == b.scan_index && a.label == b.label);
            if !aligned {
                return Err(PipelineError::Internal(
                    "reference predictions do not align with the evaluated records".into(),
                ));
            }
            let scores_a: Vec<f64> = records.iter().map(|r| r.risk).collect();
            let scores_b: Vec<f64> = ref_records.iter().map(|r| r.risk).collect();
            let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
            let outcome = metrics::delong_test(&scores_a, &scores_b, &labels)?;
            Some(DelongComparison {
                reference_approach: ref_manifest.approach.clone(),
                reference_auroc: outcome.auroc_b,
                p_value: outcome.p_value,
            })
        }
        None => None,
    };

    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        approach: manifest.approach.clone(),
        horizon_years: manifest.horizon_years,
        scope: scope.as_str().to_string(),
        seed: config.seed,
        config_sha256: config.sha256(),
        config_text: config.canonical_text(),
        main,
        delong_vs_reference,
        subgroups: cvharness::subgroup_report(&records).iter().map(Into::into).collect(),
        klg: cvharness::klg_report(&records).iter().map(Into::into).collect(),
    };
    write_text(Path::new(&config.report_path), &report.to_json())?;
    Ok(report)
}

#[derive(Debug)]
pub struct ReportTables {
    pub text: String,
    pub main_csv: String,
    pub subgroup_csv: String,
    pub klg_csv: String,
}

/// Loads report files and renders the combined text and CSV tables.
pub fn run_report(paths: &[PathBuf]) -> Result<(Vec<EvaluationReport>, ReportTables), PipelineError> {
    let reports: Vec<EvaluationReport> =
        paths.iter().map(|p| report::load_report(p)).collect::<Result<_, _>>()?;
    let tables = ReportTables {
        text: report::render_full_text(&reports),
        main_csv: report::main_table_csv(&reports),
        subgroup_csv: report::subgroup_csv(&reports),
        klg_csv: report::klg_csv(&reports),
    };
    Ok((reports, tables))
}

//! Versioned evaluation reports and their table renderings.
//!
//! An [`EvaluationReport`] is the JSON an evaluation run writes: headline
//! metrics with bootstrap intervals, the optional paired AUROC comparison
//! against a reference bundle, and the subgroup and per-grade breakdowns.
//! The rendering functions turn one or more reports into aligned plain-text
//! tables and CSV exports; metrics that are undefined on a slice render as
//! `—` with the recorded reason, never as a number.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cvharness::{KlgRow, SubgroupRow};
use crate::metrics::ConfidenceInterval;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("report {path}: schema version {found} unsupported (expected {expected})")]
    SchemaVersion { path: String, found: u32, expected: u32 },
    #[error("report {path}: {message}")]
    Parse { path: String, message: String },
    #[error("report {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub lower: f64,
    pub upper: f64,
}

impl From<ConfidenceInterval> for Ci {
    fn from(ci: ConfidenceInterval) -> Self {
        Ci { lower: ci.lower, upper: ci.upper }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainMetrics {
    pub n_scans: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: f64,
    pub auroc_ci: Ci,
    pub auprc: f64,
    pub auprc_ci: Ci,
}

/// Paired comparison of this report's scores against a reference bundle on
/// the identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelongComparison {
    pub reference_approach: String,
    pub reference_auroc: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEntry {
    pub cohort: String,
    pub n_scans: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub note: Option<String>,
}

impl From<&SubgroupRow> for SubgroupEntry {
    fn from(row: &SubgroupRow) -> Self {
        SubgroupEntry {
            cohort: row.name.clone(),
            n_scans: row.n_scans,
            n_pos: row.n_pos,
            n_neg: row.n_neg,
            auroc: row.auroc,
            auprc: row.auprc,
            note: row.note.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlgEntry {
    pub klg: u8,
    pub n_scans: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: Option<f64>,
    pub note: Option<String>,
}

impl From<&KlgRow> for KlgEntry {
    fn from(row: &KlgRow) -> Self {
        KlgEntry {
            klg: row.klg,
            n_scans: row.n_scans,
            n_pos: row.n_pos,
            n_neg: row.n_neg,
            auroc: row.auroc,
            note: row.note.clone(),
        }
    }
}

/// One evaluation of one bundle on one cohort at one scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub approach: String,
    pub horizon_years: u32,
    pub scope: String,
    pub seed: u64,
    pub config_sha256: String,
    /// The resolved configuration the run used, embedded verbatim so the
    /// report alone suffices to reproduce it.
    pub config_text: String,
    pub main: MainMetrics,
    pub delong_vs_reference: Option<DelongComparison>,
    pub subgroups: Vec<SubgroupEntry>,
    pub klg: Vec<KlgEntry>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serialization is infallible");
        text.push('\n');
        text
    }
}

/// Parses report JSON, checking the schema version before anything else so a
/// version mismatch is reported as such rather than as a missing field.
pub fn parse_report(origin: &str, text: &str) -> Result<EvaluationReport, ReportError> {
    #[derive(Deserialize)]
    struct VersionOnly {
        schema_version: u32,
    }
    let version: VersionOnly = serde_json::from_str(text)
        .map_err(|e| ReportError::Parse { path: origin.to_string(), message: e.to_string() })?;
    if version.schema_version != REPORT_SCHEMA_VERSION {
        return Err(ReportError::SchemaVersion {
            path: origin.to_string(),
            found: version.schema_version,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    serde_json::from_str(text)
        .map_err(|e| ReportError::Parse { path: origin.to_string(), message: e.to_string() })
}

pub fn load_report(path: &Path) -> Result<EvaluationReport, ReportError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ReportError::Io { path: display.clone(), source })?;
    parse_report(&display, &text)
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}

/// Formats a p-value: scientific below 1e-3, four decimals otherwise.
pub fn fmt_p(p: f64) -> String {
    if p < 1e-3 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

/// `0.8123 [0.7900, 0.8300]`
fn fmt_with_ci(value: f64, ci: Ci) -> String {
    format!("{} [{}, {}]", fmt_metric(value), fmt_metric(ci.lower), fmt_metric(ci.upper))
}

const ABSENT: &str = "—";

fn fmt_optional(v: Option<f64>) -> String {
    v.map(fmt_metric).unwrap_or_else(|| ABSENT.to_string())
}

/// Pads each column to its widest cell. Numeric-looking columns read best
/// right-aligned; `right_align` marks them by index.
fn render_aligned(headers: &[&str], rows: &[Vec<String>], right_align: &[usize]) -> String {
    let n_cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let render_row = |cells: &[String]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let pad = widths[i] - cell.chars().count();
            if right_align.contains(&i) {
                line.extend(std::iter::repeat_n(' ', pad));
                line.push_str(cell);
            } else {
                line.push_str(cell);
                if i + 1 < n_cols {
                    line.extend(std::iter::repeat_n(' ', pad));
                }
            }
        }
        line.truncate(line.trim_end().len());
        line
    };
    let header_cells: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let mut out = render_row(&header_cells);
    out.push('\n');
    let total: usize = widths.iter().sum::<usize>() + 2 * (n_cols - 1);
    out.extend(std::iter::repeat_n('-', total));
    out.push('\n');
    for row in rows {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out
}

/// Headline table: one row per report.
pub fn render_main_table(reports: &[EvaluationReport]) -> String {
    let headers =
        ["approach", "horizon", "scope", "n_pos", "n_neg", "auroc [95% ci]", "auprc [95% ci]", "delong p vs ref"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.approach.clone(),
                format!("{}yr", r.horizon_years),
                r.scope.clone(),
                r.main.n_pos.to_string(),
                r.main.n_neg.to_string(),
                fmt_with_ci(r.main.auroc, r.main.auroc_ci),
                fmt_with_ci(r.main.auprc, r.main.auprc_ci),
                r.delong_vs_reference
                    .as_ref()
                    .map(|d| format!("{} (vs {})", fmt_p(d.p_value), d.reference_approach))
                    .unwrap_or_else(|| ABSENT.to_string()),
            ]
        })
        .collect();
    render_aligned(&headers, &rows, &[3, 4, 5, 6])
}

pub fn render_subgroup_table(report: &EvaluationReport) -> String {
    let headers = ["cohort", "n_scans", "n_pos", "n_neg", "auroc", "auprc", "note"];
    let rows: Vec<Vec<String>> = report
        .subgroups
        .iter()
        .map(|s| {
            vec![
                s.cohort.clone(),
                s.n_scans.to_string(),
                s.n_pos.to_string(),
                s.n_neg.to_string(),
                fmt_optional(s.auroc),
                fmt_optional(s.auprc),
                s.note.clone().unwrap_or_default(),
            ]
        })
        .collect();
    render_aligned(&headers, &rows, &[1, 2, 3, 4, 5])
}

pub fn render_klg_table(report: &EvaluationReport) -> String {
    let headers = ["klg", "n_scans", "n_pos", "n_neg", "auroc", "note"];
    let rows: Vec<Vec<String>> = report
        .klg
        .iter()
        .map(|k| {
            vec![
                k.klg.to_string(),
                k.n_scans.to_string(),
                k.n_pos.to_string(),
                k.n_neg.to_string(),
                fmt_optional(k.auroc),
                k.note.clone().unwrap_or_default(),
            ]
        })
        .collect();
    render_aligned(&headers, &rows, &[0, 1, 2, 3, 4])
}

/// The complete plain-text rendering: headline table over all reports, then
/// each report's subgroup and per-grade tables.
pub fn render_full_text(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("== headline metrics ==\n");
    out.push_str(&render_main_table(reports));
    for r in reports {
        let tag = format!("{} {}yr {}", r.approach, r.horizon_years, r.scope);
        out.push_str(&format!("\n== subgroups: {tag} ==\n"));
        out.push_str(&render_subgroup_table(r));
        out.push_str(&format!("\n== by radiographic grade: {tag} ==\n"));
        out.push_str(&render_klg_table(r));
    }
    out
}

fn csv_row(cells: &[String]) -> String {
    // No cell we emit contains commas or quotes; keep the writer trivial.
    debug_assert!(cells.iter().all(|c| !c.contains(',') && !c.contains('"')));
    cells.join(",")
}

/// CSV of the headline table, full float precision, absent values empty.
pub fn main_table_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from(
        "approach,horizon_years,scope,n_scans,n_pos,n_neg,auroc,auroc_ci_lower,auroc_ci_upper,auprc,auprc_ci_lower,auprc_ci_upper,delong_reference,delong_p\n",
    );
    for r in reports {
        let (reference, p) = r
            .delong_vs_reference
            .as_ref()
            .map(|d| (d.reference_approach.clone(), d.p_value.to_string()))
            .unwrap_or_default();
        out.push_str(&csv_row(&[
            r.approach.clone(),
            r.horizon_years.to_string(),
            r.scope.clone(),
            r.main.n_scans.to_string(),
            r.main.n_pos.to_string(),
            r.main.n_neg.to_string(),
            r.main.auroc.to_string(),
            r.main.auroc_ci.lower.to_string(),
            r.main.auroc_ci.upper.to_string(),
            r.main.auprc.to_string(),
            r.main.auprc_ci.lower.to_string(),
            r.main.auprc_ci.upper.to_string(),
            reference,
            p,
        ]));
        out.push('\n');
    }
    out
}

/// CSV of every report's subgroup rows, keyed by approach/horizon/scope.
pub fn subgroup_csv(reports: &[EvaluationReport]) -> String {
    let mut out =
        String::from("approach,horizon_years,scope,cohort,n_scans,n_pos,n_neg,auroc,auprc,note\n");
    for r in reports {
        for s in &r.subgroups {
            out.push_str(&csv_row(&[
                r.approach.clone(),
                r.horizon_years.to_string(),
                r.scope.clone(),
                s.cohort.clone(),
                s.n_scans.to_string(),
                s.n_pos.to_string(),
                s.n_neg.to_string(),
                s.auroc.map(|v| v.to_string()).unwrap_or_default(),
                s.auprc.map(|v| v.to_string()).unwrap_or_default(),
                s.note.clone().unwrap_or_default().replace(',', ";"),
            ]));
            out.push('\n');
        }
    }
    out
}

/// CSV of every report's per-grade rows, keyed by approach/horizon/scope.
pub fn klg_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("approach,horizon_years,scope,klg,n_scans,n_pos,n_neg,auroc,note\n");
    for r in reports {
        for k in &r.klg {
            out.push_str(&csv_row(&[
                r.approach.clone(),
                r.horizon_years.to_string(),
                r.scope.clone(),
                k.klg.to_string(),
                k.n_scans.to_string(),
                k.n_pos.to_string(),
                k.n_neg.to_string(),
                k.auroc.map(|v| v.to_string()).unwrap_or_default(),
                k.note.clone().unwrap_or_default().replace(',', ";"),
            ]));
            out.push('\n');
        }
    }
    out
}

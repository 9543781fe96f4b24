//! Flat `key = value` run configuration.
//!
//! One dotted key per line, `#` comments, blank lines ignored. Every key has
//! a default, unknown or duplicate keys are hard errors citing the line, and
//! the canonical serialization (all keys, sorted, resolved values) is what
//! gets hashed into run manifests — two runs with the same hash ran the same
//! configuration, whatever their files looked like.

use sha2::{Digest, Sha256};

use crate::cohortgen::SimConfig;
use crate::cvharness::{Approach, TrainSettings};
use crate::exec::Threads;
use crate::gradnet::AdamConfig;
use crate::metrics::BootstrapParams;
use crate::riskform::Horizon;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: key {key:?}: {message}")]
    InvalidValue { line: usize, key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything one run needs, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub cohort: SimConfig,
    pub hidden_dims: Vec<usize>,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_knees: usize,
    pub approach: Approach,
    pub horizon: Horizon,
    pub outer_folds: usize,
    /// Hinge margin for the penalty approaches. Defaults depend on the
    /// approach (1.0 for the contrastive penalty alone, 2.0 otherwise) and an
    /// explicit `reg.margin` always wins.
    pub margin: f64,
    pub gamma: f64,
    pub n_resamples: usize,
    pub level: f64,
    pub threads: Threads,
    /// Cohort CSV: written by `simulate`, read by `train` and `evaluate`.
    pub cohort_csv: String,
    /// Directory that holds the bundle manifest and member checkpoints.
    pub bundle_dir: String,
    /// Where `evaluate` writes its report JSON.
    pub report_path: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            cohort: SimConfig::default(),
            hidden_dims: vec![32, 16],
            adam: AdamConfig::default(),
            epochs: 30,
            batch_knees: 16,
            approach: Approach::Baseline,
            horizon: Horizon::OneYear,
            outer_folds: 7,
            margin: default_margin(Approach::Baseline),
            gamma: 0.1,
            n_resamples: 2000,
            level: 0.95,
            threads: 0,
            cohort_csv: "out/cohort.csv".into(),
            bundle_dir: "out/bundle".into(),
            report_path: "out/report.json".into(),
        }
    }
}

pub fn default_margin(approach: Approach) -> f64 {
    match approach {
        Approach::ConReg => 1.0,
        _ => 2.0,
    }
}

impl RunConfig {
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            approach: self.approach,
            horizon: self.horizon,
            outer_folds: self.outer_folds,
            hidden_dims: self.hidden_dims.clone(),
            adam: self.adam,
            epochs: self.epochs,
            batch_knees: self.batch_knees,
            margin: self.margin,
            gamma: self.gamma,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn bootstrap_params(&self) -> BootstrapParams {
        BootstrapParams {
            n_resamples: self.n_resamples,
            level: self.level,
            seed: self.seed,
            threads: self.threads,
        }
    }

    /// The experiment configuration in canonical form: every result-determining
    /// key, sorted, one per line, resolved values. Execution-only keys
    /// (`run.threads`, `paths.*`) are excluded — they say where artifacts go
    /// and how fast they are computed, never what they contain — so artifacts
    /// embedding this text are identical whatever machine layout produced
    /// them. Parsing it back restores the experiment exactly, with execution
    /// keys at their defaults.
    pub fn canonical_text(&self) -> String {
        let mut lines: Vec<String> = KEYS
            .iter()
            .filter(|k| !EXECUTION_KEYS.contains(&k.name))
            .map(|k| format!("{} = {}", k.name, (k.get)(self)))
            .collect();
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn finalize(mut self, explicit_margin: Option<f64>) -> Result<RunConfig, ConfigError> {
        self.margin = explicit_margin.unwrap_or_else(|| default_margin(self.approach));
        self.cohort.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.n_resamples < 100 {
            return Err(ConfigError::Invalid(format!(
                "bootstrap.n_resamples must be at least 100, got {}",
                self.n_resamples
            )));
        }
        if !(self.level > 0.5 && self.level < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "bootstrap.level must be in (0.5, 1), got {}",
                self.level
            )));
        }
        self.train_settings().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(self)
    }
}

struct Key {
    name: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut Draft, &str) -> Result<(), String>,
}

/// Parse state: the config being built plus the bits whose resolution is
/// deferred until every line is read.
struct Draft {
    config: RunConfig,
    explicit_margin: Option<f64>,
    inner_folds: Option<usize>,
}

fn parse_num<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid {what} {value:?}"))
}

fn parse_dims(value: &str) -> Result<Vec<usize>, String> {
    let dims: Result<Vec<usize>, String> =
        value.split(',').map(|p| parse_num(p.trim(), "layer width")).collect();
    let dims = dims?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(format!("hidden dims must be positive, got {value:?}"));
    }
    Ok(dims)
}

fn join_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Keys that do not influence results: excluded from the canonical text and
/// the hash.
const EXECUTION_KEYS: [&str; 4] =
    ["run.threads", "paths.cohort_csv", "paths.bundle_dir", "paths.report"];

/// Every recognized key, its canonical getter, and its setter. Adding a key
/// here is the single change needed for parse, canonicalization, and hashing
/// to all agree.
const KEYS: &[Key] = &[
    Key { name: "seed", get: |c| c.seed.to_string(), set: |d, v| { d.config.seed = parse_num(v, "integer")?; Ok(()) } },
    Key { name: "cohort.n_subjects", get: |c| c.cohort.n_subjects.to_string(), set: |d, v| { d.config.cohort.n_subjects = parse_num(v, "integer")?; Ok(()) } },
    Key { name: "cohort.feature_dim", get: |c| c.cohort.feature_dim.to_string(), set: |d, v| { d.config.cohort.feature_dim = parse_num(v, "integer")?; Ok(()) } },
    Key { name: "cohort.noise_std", get: |c| c.cohort.noise_std.to_string(), set: |d, v| { d.config.cohort.noise_std = parse_num(v, "number")?; Ok(()) } },
    Key { name: "cohort.visit_interval_months", get: |c| c.cohort.visit_interval_months.to_string(), set: |d, v| { d.config.cohort.visit_interval_months = parse_num(v, "integer")?; Ok(()) } },
    Key { name: "cohort.followup_months", get: |c| c.cohort.followup_months.to_string(), set: |d, v| { d.config.cohort.followup_months = parse_num(v, "integer")?; Ok(()) } },
    Key { name: "cohort.visit_attendance", get: |c| c.cohort.visit_attendance.to_string(), set: |d, v| { d.config.cohort.visit_attendance = parse_num(v, "number")?; Ok(()) } },
    Key { name: "cohort.dropout_rate", get: |c| c.cohort.dropout_rate.to_string(), set: |d, v| { d.config.cohort.dropout_rate = parse_num(v, "number")?; Ok(()) } },
    Key { name: "cohort.severity_threshold", get: |c| c.cohort.severity_threshold.to_string(), set: |d, v| { d.config.cohort.severity_threshold = parse_num(v, "number")?; Ok(()) } },
    Key { name: "cohort.threshold_noise_std", get: |c| c.cohort.threshold_noise_std.to_string(), set: |d, v| { d.config.cohort.threshold_noise_std = parse_num(v, "number")?; Ok(()) } },
    Key { name: "model.hidden_dims", get: |c| join_dims(&c.hidden_dims), set: |d, v| { d.config.hidden_dims = parse_dims(v)?; Ok(()) } },
    Key { name: "optim.lr", get: |c| c.adam.lr.to_string(), set: |d, v| { d.config.adam.lr = parse_num(v, "number")?; Ok(()) } },
    Key { name: "optim.beta1", get: |c| c.adam.beta1.to_string(), set: |d, v| { d.config.adam.beta1 = parse_num(v, "number")?; Ok(()) } },
    Key { name: "optim.beta2", get: |c| c.adam.beta2.to_string(), set: |d, v| { d.config.adam.beta2 = parse_num(v, "number")?; Ok(()) } },
    Key { name: "optim.eps", get: |c| c.adam.eps.to_string(), set: |d, v| { d.config.adam.eps = parse_num(v, "number")?; Ok(()) } },
    Key { name: "optim.weight_decay", get: |c| c.adam.weight_decay.to_string(), set: |d, v| { d.config.adam.weight_decay = parse_num(v, "number")?; Ok(()) } },
    Key { name: "train.epochs", get: |c| c.epochs.to_string(), set: |d, v| { d.config.epochs = parse_num(v, "integer")?; Ok(()) } },
    Key { name: "train.batch_knees", get: |c| c.batch_knees.to_string(), set: |d, v| { d.config.batch_knees = parse_num(v, "integer")?; Ok(()) } },
    Key {
        name: "train.approach",
        get: |c| c.approach.as_str().to_string(),
        set: |d, v| {
            d.config.approach = Approach::from_str_spelling(v).ok_or(format!(
                "unknown approach {v:?}; expected baseline, riskreg, conreg, conreg+riskreg, riskform1, or riskform2"
            ))?;
            Ok(())
        },
    },
    Key {
        name: "train.horizon_years",
        get: |c| c.horizon.years().to_string(),
        set: |d, v| {
            let years: u32 = parse_num(v, "integer")?;
            d.config.horizon =
                Horizon::from_years(years).ok_or(format!("horizon must be 1, 2, or 4 years, got {years}"))?;
            Ok(())
        },
    },
    Key { name: "cv.outer_folds", get: |c| c.outer_folds.to_string(), set: |d, v| { d.config.outer_folds = parse_num(v, "integer")?; Ok(()) } },
    Key {
        name: "cv.inner_folds",
        get: |c| (c.outer_folds - 1).to_string(),
        set: |d, v| {
            d.inner_folds = Some(parse_num(v, "integer")?);
            Ok(())
        },
    },
    Key { name: "reg.margin", get: |c| c.margin.to_string(), set: |d, v| { d.explicit_margin = Some(parse_num(v, "number")?); Ok(()) } },
    Key { name: "reg.gamma", get: |c| c.gamma.to_string(), set: |d, v| { d.config.gamma = parse_num(v, "number")?; Ok(()) } },
    Key { name: "bootstrap.n_resamples", get: |c| c.n_resamples.to_string(), set: |d, v| { d.config.n_resamples = parse_num(v, "integer")?; Ok(()) } },
    Key { name: "bootstrap.level", get: |c| c.level.to_string(), set: |d, v| { d.config.level = parse_num(v, "number")?; Ok(()) } },
    Key { name: "run.threads", get: |c| c.threads.to_string(), set: |d, v| { d.config.threads = parse_num(v, "integer")?; Ok(()) } },
    Key { name: "paths.cohort_csv", get: |c| c.cohort_csv.clone(), set: |d, v| { d.config.cohort_csv = v.to_string(); Ok(()) } },
    Key { name: "paths.bundle_dir", get: |c| c.bundle_dir.clone(), set: |d, v| { d.config.bundle_dir = v.to_string(); Ok(()) } },
    Key { name: "paths.report", get: |c| c.report_path.clone(), set: |d, v| { d.config.report_path = v.to_string(); Ok(()) } },
];

/// Parses a config file and applies `overrides` (typically from CLI flags)
/// on top, then resolves deferred defaults. Override errors are reported
/// with line 0.
pub fn parse_config(text: &str, overrides: &[(&str, &str)]) -> Result<RunConfig, ConfigError> {
    let mut draft =
        Draft { config: RunConfig::default(), explicit_margin: None, inner_folds: None };
    let mut seen: Vec<&str> = Vec::new();

    let apply = |draft: &mut Draft, seen: &mut Vec<&str>, line: usize, key: &str, value: &str| {
        let known = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_string() })?;
        if seen.contains(&known.name) {
            return Err(ConfigError::DuplicateKey { line, key: key.to_string() });
        }
        seen.push(known.name);
        (known.set)(draft, value).map_err(|message| ConfigError::InvalidValue {
            line,
            key: key.to_string(),
            message,
        })
    };

    for (ix, raw) in text.lines().enumerate() {
        let line = ix + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| ConfigError::Malformed { line, text: raw.trim().to_string() })?;
        apply(&mut draft, &mut seen, line, key.trim(), value.trim())?;
    }

    // CLI overrides replace file values, so the duplicate check restarts.
    let mut seen_overrides: Vec<&str> = Vec::new();
    for (key, value) in overrides {
        apply(&mut draft, &mut seen_overrides, 0, key, value)?;
    }

    if let Some(inner) = draft.inner_folds {
        if inner != draft.config.outer_folds - 1 {
            return Err(ConfigError::Invalid(format!(
                "cv.inner_folds must equal cv.outer_folds - 1 (here {}), got {inner}",
                draft.config.outer_folds - 1
            )));
        }
    }
    let Draft { config, explicit_margin, .. } = draft;
    config.finalize(explicit_margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_text() {
        let config = RunConfig::default();
        let text = config.canonical_text();
        let reparsed = parse_config(&text, &[]).unwrap();
        assert_eq!(reparsed, config);
        assert_eq!(reparsed.sha256(), config.sha256());
        assert_eq!(config.sha256().len(), 64);
    }

    #[test]
    fn every_semantic_key_appears_in_canonical_text() {
        let text = RunConfig::default().canonical_text();
        for key in KEYS {
            let present = text.lines().any(|l| l.starts_with(&format!("{} = ", key.name)));
            assert_eq!(present, !EXECUTION_KEYS.contains(&key.name), "{}", key.name);
        }
        assert_eq!(text.lines().count(), KEYS.len() - EXECUTION_KEYS.len());
    }

    #[test]
    fn execution_keys_do_not_affect_identity() {
        let base = RunConfig::default();
        let mut moved = base.clone();
        moved.threads = 3;
        moved.cohort_csv = "elsewhere/c.csv".into();
        moved.bundle_dir = "elsewhere/b".into();
        moved.report_path = "elsewhere/r.json".into();
        assert_eq!(moved.canonical_text(), base.canonical_text());
        assert_eq!(moved.sha256(), base.sha256());
        // Reparsing the canonical text restores the experiment with
        // execution keys back at their defaults.
        assert_eq!(parse_config(&moved.canonical_text(), &[]).unwrap(), base);
    }

    #[test]
    fn unknown_key_is_a_hard_error_with_its_line() {
        let text = "seed = 7\n\n# comment\ncohort.n_subects = 100\n";
        match parse_config(text, &[]) {
            Err(ConfigError::UnknownKey { line, key }) => {
                assert_eq!(line, 4);
                assert_eq!(key, "cohort.n_subects");
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        match parse_config("seed = 1\nseed = 2\n", &[]) {
            Err(ConfigError::DuplicateKey { line, key }) => {
                assert_eq!((line, key.as_str()), (2, "seed"));
            }
            other => panic!("expected duplicate-key error, got {other:?}"),
        }
        assert!(matches!(
            parse_config("just some words\n", &[]),
            Err(ConfigError::Malformed { line: 1, .. })
        ));
        match parse_config("seed = notanumber\n", &[]) {
            Err(ConfigError::InvalidValue { line: 1, key, .. }) => assert_eq!(key, "seed"),
            other => panic!("expected invalid-value error, got {other:?}"),
        }
    }

    #[test]
    fn margin_defaults_follow_the_approach() {
        let conreg = parse_config("train.approach = conreg\n", &[]).unwrap();
        assert_eq!(conreg.margin, 1.0);
        let riskreg = parse_config("train.approach = riskreg\n", &[]).unwrap();
        assert_eq!(riskreg.margin, 2.0);
        let both = parse_config("train.approach = conreg+riskreg\n", &[]).unwrap();
        assert_eq!(both.margin, 2.0);
        let explicit = parse_config("train.approach = conreg\nreg.margin = 3.5\n", &[]).unwrap();
        assert_eq!(explicit.margin, 3.5);
    }

    #[test]
    fn all_approach_and_horizon_spellings_parse() {
        for approach in Approach::ALL {
            let text = format!("train.approach = {approach}\n");
            assert_eq!(parse_config(&text, &[]).unwrap().approach, approach);
        }
        for years in [1u32, 2, 4] {
            let text = format!("train.horizon_years = {years}\n");
            assert_eq!(parse_config(&text, &[]).unwrap().horizon.years(), years);
        }
        assert!(matches!(
            parse_config("train.horizon_years = 3\n", &[]),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            parse_config("train.approach = riskform3\n", &[]),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn inner_folds_must_match_outer_minus_one() {
        assert!(parse_config("cv.outer_folds = 5\ncv.inner_folds = 4\n", &[]).is_ok());
        match parse_config("cv.inner_folds = 5\n", &[]) {
            Err(ConfigError::Invalid(msg)) => assert!(msg.contains("inner_folds"), "{msg}"),
            other => panic!("expected invalid-config error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_replace_file_values() {
        let text = "seed = 1\ntrain.approach = baseline\n";
        let config =
            parse_config(text, &[("seed", "9"), ("train.approach", "riskform2")]).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.approach, Approach::RiskForm2);
        assert!(matches!(
            parse_config(text, &[("nope", "1")]),
            Err(ConfigError::UnknownKey { line: 0, .. })
        ));
    }

    #[test]
    fn hash_tracks_value_changes() {
        let a = parse_config("seed = 1\n", &[]).unwrap();
        let b = parse_config("seed = 2\n", &[]).unwrap();
        assert_ne!(a.sha256(), b.sha256());
        let c = parse_config("seed = 1\n# different file, same values\n", &[]).unwrap();
        assert_eq!(a.sha256(), c.sha256());
    }

    #[test]
    fn semantic_validation_runs_at_the_end() {
        assert!(matches!(
            parse_config("bootstrap.n_resamples = 50\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse_config("cohort.n_subjects = 0\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(parse_config("train.epochs = 0\n", &[]), Err(ConfigError::Invalid(_))));
    }
}

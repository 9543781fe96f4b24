//! `progrisk` — simulate, train, evaluate, report.
//!
//! Thin argument layer over `progrisk::pipeline`; every command is
//! deterministic given its config file and seed. Exit codes: 0 success,
//! 1 usage or config error, 2 data error, 3 internal invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use progrisk::config::{parse_config, RunConfig};
use progrisk::cvharness::Scope;
use progrisk::pipeline::{self, PipelineError};
use progrisk::report;

#[derive(Parser)]
#[command(
    name = "progrisk",
    version,
    about = "Progressive knee-replacement risk models: simulate cohorts, train nested-CV bundles, evaluate, report."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; defaults fill absent keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Approach: baseline, riskreg, conreg, conreg+riskreg, riskform1, riskform2.
    #[arg(long)]
    approach: Option<String>,
    /// Label horizon in years: 1, 2, or 4.
    #[arg(long)]
    horizon: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort; writes the CSV plus a `.config` sidecar.
    Simulate(ConfigArgs),
    /// Train the full nested cross-validation bundle (42 members).
    Train(ConfigArgs),
    /// Score a cohort with a trained bundle and write the report JSON.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// internal: subjects scored only by members that never trained on
        /// them; external: all members score everything (held-out data only).
        #[arg(long, default_value = "internal", value_name = "internal|external")]
        scope: String,
        /// Manifest of a reference bundle for the paired AUROC comparison.
        #[arg(long, value_name = "MANIFEST")]
        reference: Option<PathBuf>,
    },
    /// Render report JSONs as aligned text tables and CSV exports.
    Report {
        /// Report files written by `evaluate`.
        #[arg(required = true, value_name = "REPORT")]
        reports: Vec<PathBuf>,
        /// Also write tables.txt, main.csv, subgroups.csv, klg.csv here.
        #[arg(long, value_name = "DIR")]
        export_dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Pipeline(PipelineError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(e) => e.exit_code() as u8,
        }
    }

    fn print(&self) {
        match self {
            CliError::Usage(message) => eprintln!("error: {message}"),
            CliError::Pipeline(e) => {
                eprintln!("error: {e}");
                // Variants that interpolate their source into their own
                // message would repeat it verbatim in the chain; skip those.
                let mut shown = e.to_string();
                let mut source = std::error::Error::source(e);
                while let Some(s) = source {
                    let message = s.to_string();
                    if !shown.contains(&message) {
                        eprintln!("  caused by: {message}");
                        shown = message;
                    }
                    source = s.source();
                }
            }
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?,
            None => String::new(),
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(("seed", seed.to_string()));
        }
        if let Some(approach) = &self.approach {
            overrides.push(("train.approach", approach.clone()));
        }
        if let Some(horizon) = self.horizon {
            overrides.push(("train.horizon_years", horizon.to_string()));
        }
        let pairs: Vec<(&str, &str)> = overrides.iter().map(|(k, v)| (*k, v.as_str())).collect();
        parse_config(&text, &pairs).map_err(|e| CliError::Pipeline(e.into()))
    }
}

fn parse_scope(scope: &str) -> Result<Scope, CliError> {
    match scope {
        "internal" => Ok(Scope::Internal),
        "external" => Ok(Scope::External),
        other => Err(CliError::Usage(format!("scope must be internal or external, got {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let config = args.load()?;
            let outcome = pipeline::run_simulate(&config)?;
            let s = &outcome.summary;
            println!(
                "cohort: {} knees ({} cases, {} controls), {} paired, {} single-scan, {} scans",
                s.n_knees, s.n_cases, s.n_controls, s.n_paired, s.n_single_scan, s.n_scans
            );
            for (horizon, [set1, set2, set3, not_applicable]) in &s.group_sizes {
                println!(
                    "  {horizon}: Set1 {set1}, Set2 {set2}, Set3 {set3}, not-applicable {not_applicable}"
                );
            }
            println!("wrote {}", outcome.csv_path.display());
            Ok(())
        }
        Command::Train(args) => {
            let config = args.load()?;
            let outcome = pipeline::run_train(&config)?;
            for (outer, inner) in &outcome.fallback_members {
                println!(
                    "member ({outer}, {inner}): validation fold is single-class at this horizon; epoch selected by loss"
                );
            }
            let n_members = config.outer_folds * (config.outer_folds - 1);
            println!("trained {n_members} {} {} ensemble members", config.approach, config.horizon);
            println!("manifest sha256 {}", outcome.manifest_sha256);
            println!("wrote {}", outcome.manifest_path.display());
            Ok(())
        }
        Command::Evaluate { config: args, scope, reference } => {
            let config = args.load()?;
            let scope = parse_scope(&scope)?;
            let report = pipeline::run_evaluate(&config, scope, reference.as_deref())?;
            let m = &report.main;
            println!(
                "{} {}yr {}: auroc {:.4} [{:.4}, {:.4}], auprc {:.4} [{:.4}, {:.4}] ({} pos / {} neg)",
                report.approach,
                report.horizon_years,
                report.scope,
                m.auroc,
                m.auroc_ci.lower,
                m.auroc_ci.upper,
                m.auprc,
                m.auprc_ci.lower,
                m.auprc_ci.upper,
                m.n_pos,
                m.n_neg
            );
            if let Some(delong) = &report.delong_vs_reference {
                println!(
                    "delong vs {}: reference auroc {:.4}, p = {}",
                    delong.reference_approach,
                    delong.reference_auroc,
                    report::fmt_p(delong.p_value)
                );
            }
            println!("wrote {}", config.report_path);
            Ok(())
        }
        Command::Report { reports, export_dir } => {
            let (_, tables) = pipeline::run_report(&reports)?;
            print!("{}", tables.text);
            if let Some(dir) = export_dir {
                std::fs::create_dir_all(&dir)
                    .map_err(|e| CliError::Usage(format!("export dir {}: {e}", dir.display())))?;
                for (name, content) in [
                    ("tables.txt", &tables.text),
                    ("main.csv", &tables.main_csv),
                    ("subgroups.csv", &tables.subgroup_csv),
                    ("klg.csv", &tables.klg_csv),
                ] {
                    let path = dir.join(name);
                    std::fs::write(&path, content)
                        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                    println!("wrote {}", path.display());
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; clap marks them as
            // non-errors, which keeps exit 0 for those and 1 for bad usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.print();
            ExitCode::from(e.exit_code())
        }
    }
}

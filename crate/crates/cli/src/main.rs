//! `middev`: simulate, estimate and verify the mildly stationary AR(1) model
//! with AR(1) errors from the command line.
//!
//! Exit codes: 0 success, 1 invalid input, 2 an identity or consistency check
//! failed, 3 I/O error, 64 usage error.

mod manifest;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use middev_core::estimate::{full_estimate, ESTIMATE_CSV_HEADER};
use middev_core::harness::{self, content_hash, ExperimentConfig, ExperimentKind, HarnessError};
use middev_core::ledger::{
    build_exact_ledger, check_path_inequalities, identity_report, DEFAULT_IDENTITY_TOLERANCE,
};
use middev_core::params::{validate_conditions, ModelConfig};
use middev_core::rates::{consistency_check, RateModel};
use middev_core::simulate::generate;

use manifest::{collect_manifests, render_report, RunManifest};

const EXIT_VALIDATION: u8 = 1;
const EXIT_SCIENTIFIC: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Default experiment replica count when neither config nor flag sets one.
const DEFAULT_REPLICAS: usize = 1000;
/// Sample sizes at which growth conditions are evaluated.
const CONDITION_GRID: [usize; 4] = [1_000, 10_000, 100_000, 1_000_000];

#[derive(Parser, Debug)]
#[command(name = "middev", version, about = "Mildly stationary AR(1) laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one path and write it as a table.
    Simulate(Common),
    /// Generate one path and write its estimates.
    Estimate(Common),
    /// Check the exact algebraic identities on one path.
    Identities(Common),
    /// Check the growth conditions of the deviation scale.
    ValidateParams(Common),
    /// Concentration of the normalized path sums.
    Concentration(Common),
    /// Variances of the normalized estimators against their limits.
    Variance(Common),
    /// Empirical tail slopes against the rate function.
    Tailslope(Common),
    /// Bercu-Touati exponential inequality frequencies.
    BercuTouati(Common),
    /// Truncation and exponential-equivalence diagnostics.
    Truncation(Common),
    /// Closed-form rates and their algebraic consistency.
    Rates(Common),
    /// Summarize every manifest in the output directory as markdown.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Model or experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; `MIDDEV_OUT` takes precedence.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads, 0 for automatic; never changes results.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Sample size override.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Scientific(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Scientific(_) => EXIT_SCIENTIFIC,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Scientific(m) | CliError::Io(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Io(_) | HarnessError::Json(_) | HarnessError::Csv(_) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// What a command produced: files, a summary, and a verdict.
struct Outcome {
    config: serde_json::Value,
    outputs: Vec<PathBuf>,
    summary: Vec<String>,
    failure: Option<CliError>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn out_dir(common: &Common) -> PathBuf {
    std::env::var_os("MIDDEV_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| common.out.clone())
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let (name, stem, common) = match &command {
        Command::Simulate(c) => ("simulate", "trajectory", c),
        Command::Estimate(c) => ("estimate", "estimate", c),
        Command::Identities(c) => ("identities", "identities", c),
        Command::ValidateParams(c) => ("validate-params", "conditions", c),
        Command::Concentration(c) => ("concentration", ExperimentKind::Concentration.file_stem(), c),
        Command::Variance(c) => ("variance", ExperimentKind::VarianceMatch.file_stem(), c),
        Command::Tailslope(c) => ("tailslope", ExperimentKind::TailSlope.file_stem(), c),
        Command::BercuTouati(c) => ("bercu-touati", ExperimentKind::BercuTouati.file_stem(), c),
        Command::Truncation(c) => ("truncation", ExperimentKind::Truncation.file_stem(), c),
        Command::Rates(c) => ("rates", "rates", c),
        Command::Report(c) => ("report", "report", c),
    };
    let dir = out_dir(common);
    fs::create_dir_all(&dir)?;
    if let Command::Report(_) = command {
        let md = render_report(&collect_manifests(&dir)?);
        fs::write(dir.join("report.md"), md)?;
        return Ok(());
    }
    let started = Instant::now();
    let outcome = match &command {
        Command::Simulate(c) => simulate(c, &dir)?,
        Command::Estimate(c) => estimate(c, &dir)?,
        Command::Identities(c) => identities(c, &dir)?,
        Command::ValidateParams(c) => validate_params(c, &dir)?,
        Command::Concentration(c) => experiment(c, &dir, ExperimentKind::Concentration)?,
        Command::Variance(c) => experiment(c, &dir, ExperimentKind::VarianceMatch)?,
        Command::Tailslope(c) => experiment(c, &dir, ExperimentKind::TailSlope)?,
        Command::BercuTouati(c) => experiment(c, &dir, ExperimentKind::BercuTouati)?,
        Command::Truncation(c) => experiment(c, &dir, ExperimentKind::Truncation)?,
        Command::Rates(c) => rates(c, &dir)?,
        Command::Report(_) => unreachable!("handled above"),
    };
    let canonical = serde_json::to_vec(&outcome.config).map_err(|e| CliError::Io(e.to_string()))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: name.to_string(),
        config: outcome.config,
        input_hash: content_hash(&canonical),
        outputs: outcome.outputs,
        duration_seconds: started.elapsed().as_secs_f64(),
        exit_code: outcome.failure.as_ref().map_or(0, CliError::code),
        summary: outcome.summary,
    };
    manifest.write(&dir, stem)?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn read_config(common: &Common) -> Result<serde_json::Value, CliError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| validation("--config is required"))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
}

/// A model config, or the model inside an experiment config, with `--n` applied.
fn load_model(common: &Common) -> Result<ModelConfig, CliError> {
    let mut value = read_config(common)?;
    if let Some(inner) = value.get_mut("model") {
        value = inner.take();
    }
    let mut model: ModelConfig = serde_json::from_value(value).map_err(validation)?;
    if let Some(n) = common.n {
        model = model.with_n(n);
    }
    model.validate().map_err(validation)?;
    Ok(model)
}

/// An experiment config of the given kind; a bare model config gets defaults.
fn load_experiment(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig, CliError> {
    let value = read_config(common)?;
    let mut cfg = if value.get("model").is_some() {
        let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(validation)?;
        cfg.experiment = kind;
        cfg
    } else {
        let model: ModelConfig = serde_json::from_value(value).map_err(validation)?;
        ExperimentConfig::new(model, kind, DEFAULT_REPLICAS, 0)
    };
    if let Some(n) = common.n {
        cfg.model = cfg.model.with_n(n);
    }
    if let Some(r) = common.replicas {
        cfg.replicas = r;
    }
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn simulate(c: &Common, dir: &Path) -> Result<Outcome, CliError> {
    let model = load_model(c)?;
    let seed = c.seed.unwrap_or(0);
    let traj = generate(&model, seed).map_err(validation)?;
    let path = dir.join(format!("trajectory.{}", c.format.ext()));
    match c.format {
        Format::Csv => traj.write_csv(fs::File::create(&path)?)?,
        Format::Json => write_json(&path, &traj)?,
    }
    Ok(Outcome {
        config: to_value(&model),
        outputs: vec![path],
        summary: vec![format!("n = {}, seed = {seed}, X_n = {}", traj.n, traj.x[traj.n])],
        failure: None,
    })
}

fn estimate(c: &Common, dir: &Path) -> Result<Outcome, CliError> {
    let model = load_model(c)?;
    let seed = c.seed.unwrap_or(0);
    let traj = generate(&model, seed).map_err(validation)?;
    let est = full_estimate(&traj).map_err(validation)?;
    let path = dir.join(format!("estimate.{}", c.format.ext()));
    match c.format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(ESTIMATE_CSV_HEADER)?;
            w.write_record(est.csv_row(seed))?;
            w.flush()?;
        }
        Format::Json => write_json(&path, &est)?,
    }
    Ok(Outcome {
        config: to_value(&model),
        outputs: vec![path],
        summary: vec![format!(
            "theta_hat = {}, rho_hat = {}, d_hat = {}",
            est.theta_hat, est.rho_hat, est.d_hat
        )],
        failure: None,
    })
}

fn identities(c: &Common, dir: &Path) -> Result<Outcome, CliError> {
    let model = load_model(c)?;
    let seed = c.seed.unwrap_or(0);
    let traj = generate(&model, seed).map_err(validation)?;
    let lg = build_exact_ledger(&traj, model.sigma).map_err(validation)?;
    let report = identity_report(&lg, DEFAULT_IDENTITY_TOLERANCE);
    let path = dir.join(format!("identities.{}", c.format.ext()));
    match c.format {
        Format::Csv => report.write_csv(fs::File::create(&path)?)?,
        Format::Json => write_json(&path, &report)?,
    }
    let mut summary = vec![format!(
        "max relative residual {:.3e} (tolerance {:.0e})",
        report.max_rel_residual(),
        report.tolerance
    )];
    let mut failure = report
        .records
        .iter()
        .find(|r| !r.pass)
        .map(|r| CliError::Scientific(format!("identity {} residual {:.3e}", r.name, r.rel_residual)));
    match check_path_inequalities(&traj) {
        Ok(_) => summary.push("path inequalities hold".into()),
        Err(e) => {
            summary.push(e.to_string());
            failure.get_or_insert(CliError::Scientific(e.to_string()));
        }
    }
    Ok(Outcome {
        config: to_value(&model),
        outputs: vec![path],
        summary,
        failure,
    })
}

fn validate_params(c: &Common, dir: &Path) -> Result<Outcome, CliError> {
    let model = load_model(c)?;
    let report = validate_conditions(&model, &CONDITION_GRID).map_err(validation)?;
    let path = dir.join(format!("conditions.{}", c.format.ext()));
    match c.format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["name", "analytic_pass", "exponent", "log_power"])?;
            for r in &report.conditions {
                w.write_record([
                    r.name.clone(),
                    r.analytic_pass.to_string(),
                    r.exponent.map(|v| v.to_string()).unwrap_or_default(),
                    r.log_power.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
        }
        Format::Json => write_json(&path, &report)?,
    }
    let summary = report
        .conditions
        .iter()
        .map(|r| format!("{}: {}", r.name, if r.analytic_pass { "pass" } else { "fail" }))
        .collect();
    let failure = (!report.all_pass()).then(|| {
        let failed: Vec<&str> = report
            .conditions
            .iter()
            .filter(|r| !r.analytic_pass)
            .map(|r| r.name.as_str())
            .collect();
        validation(format!("conditions fail: {}", failed.join(", ")))
    });
    Ok(Outcome {
        config: to_value(&model),
        outputs: vec![path],
        summary,
        failure,
    })
}

fn rates(c: &Common, dir: &Path) -> Result<Outcome, CliError> {
    let model = load_model(c)?;
    let rm = RateModel::build(model.gamma1, model.gamma2, model.sigma)
        .map_err(validation)?
        .with_noise(&model.noise_spec());
    let report = consistency_check(&rm);
    #[derive(Serialize)]
    struct RatesOutput<'a> {
        model: &'a RateModel,
        consistency: &'a middev_core::rates::ConsistencyReport,
    }
    let path = dir.join("rates.json");
    write_json(
        &path,
        &RatesOutput {
            model: &rm,
            consistency: &report,
        },
    )?;
    let failed: Vec<String> = report
        .records
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.clone())
        .chain(report.trends.iter().filter(|t| !t.pass).map(|t| t.name.clone()))
        .collect();
    let summary = vec![format!(
        "{} checks and {} trends, {} failing",
        report.records.len(),
        report.trends.len(),
        failed.len()
    )];
    let failure = (!failed.is_empty()).then(|| CliError::Scientific(format!("consistency fails: {}", failed.join(", "))));
    Ok(Outcome {
        config: to_value(&model),
        outputs: vec![path],
        summary,
        failure,
    })
}

fn experiment(c: &Common, dir: &Path, kind: ExperimentKind) -> Result<Outcome, CliError> {
    let cfg = load_experiment(c, kind)?;
    let res = harness::run(&cfg, c.threads)?;
    let mut outputs = harness::persist(&res, dir)?;
    let svg_path = dir.join(format!("{}.svg", kind.file_stem()));
    fs::write(&svg_path, plot::emit_plot(&res))?;
    outputs.push(svg_path);
    let mut summary = vec![format!(
        "replicas {} used, {} degenerate",
        res.replicas_used, res.replicas_degenerate
    )];
    summary.extend(res.stats.iter().map(|s| {
        format!("{}: estimate {:.6} target {:.6}", s.name, s.estimate, s.target)
    }));
    summary.extend(res.thresholds.iter().map(|t| match t.slope {
        Some(s) => format!("x = {}: slope {:.4} rate {:.4}", t.x, s, t.rate_prediction),
        None => format!("x = {}: censored, rate {:.4}", t.x, t.rate_prediction),
    }));
    summary.extend(res.truncation.iter().map(|t| {
        format!("n = {}: gap p99 {:.4e}", t.n, t.gap_p99)
    }));
    let violations = res.bercu_touati.iter().filter(|b| !b.pass).count();
    if !res.bercu_touati.is_empty() {
        summary.push(format!("{violations} of {} grid cells exceed the bound", res.bercu_touati.len()));
    }
    let failure = (violations > 0).then(|| CliError::Scientific(format!("{violations} Bercu-Touati cells exceed the bound")));
    Ok(Outcome {
        config: to_value(&cfg),
        outputs,
        summary,
        failure,
    })
}

//! `lasso-ate` command-line tool.
//!
//! Exit codes: 0 success, 2 input error, 3 computation error.

mod manifest;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lasso_ate::cv::{CvKinds, CvResult};
use lasso_ate::design::{build_design_matrix, FeaturizeOptions};
use lasso_ate::diagnostics::{diagnose, DiagnosticsOptions, DiagnosticsReport};
use lasso_ate::estimators::{ate_ols, ate_unadjusted, lasso_family, AteReport, EstimationOptions, Method, Tuning};
use lasso_ate::io::{write_design_csv, DataMeta, DesignMetadata, Table};
use lasso_ate::sim::{generate_population, run_monte_carlo_with_threads, MonteCarloSummary, SimulationConfig};
use lasso_ate::AteError;
use serde::Serialize;

use crate::manifest::RunManifest;

/// Default worker count for `simulate` when `--threads` is not given.
const THREADS_ENV: &str = "LASSO_ATE_THREADS";

#[derive(Parser)]
#[command(name = "lasso-ate", version, about = "Regression-adjusted ATE estimation for randomized experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the average treatment effect from an experiment CSV.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study from a JSON or TOML configuration.
    Simulate(SimulateArgs),
    /// Inspect the conditions behind the Lasso-adjusted estimators.
    Diagnose(DiagnoseArgs),
    /// Expand raw covariates into a filtered, standardized design matrix.
    Featurize(FeaturizeArgs),
}

#[derive(Args)]
struct Output {
    /// Write JSON here instead of standard output.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Print a plain-text table to standard output.
    #[arg(long)]
    table: bool,
}

#[derive(Args, Serialize)]
struct TuningArgs {
    /// Cross-validation folds.
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Number of penalty values on the data-driven grid.
    #[arg(long, default_value_t = 100)]
    n_lambda: usize,
    /// Use these penalty values for both arms instead of the data-driven grid.
    #[arg(long = "lambda", value_delimiter = ',')]
    lambdas: Vec<f64>,
}

impl TuningArgs {
    fn tuning(&self, seed: u64) -> Tuning {
        Tuning {
            n_lambda: self.n_lambda,
            fixed_lambdas: (!self.lambdas.is_empty()).then(|| self.lambdas.clone()),
            folds: self.folds,
            seed,
            ..Tuning::default()
        }
    }
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    #[serde(skip)]
    data: PathBuf,
    #[serde(skip)]
    meta: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "unadjusted,ols,cv_lasso,cv_lasso_ols")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Seed for the cross-validation folds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use `n_g` instead of `n_g - df_g` in the residual variance denominators.
    #[arg(long)]
    no_df_adjust: bool,
    /// Include the cross-validation curves in the output.
    #[arg(long)]
    emit_cv: bool,
    #[command(flatten)]
    tuning: TuningArgs,
    #[command(flatten)]
    #[serde(skip)]
    output: Output,
}

#[derive(Args)]
struct SimulateArgs {
    config: PathBuf,
    /// Overrides any seed in the configuration file.
    #[arg(long)]
    seed: u64,
    /// Worker threads; defaults to the LASSO_ATE_THREADS variable, then to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Per-replication records as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Serialize)]
struct DiagnoseArgs {
    #[serde(skip)]
    data: PathBuf,
    #[serde(skip)]
    meta: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Bootstrap resamples per arm.
    #[arg(long = "bootstrap", short = 'B', default_value_t = 1000)]
    bootstrap: usize,
    /// Selection-frequency threshold for the estimated support.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 30.0)]
    fourth_moment_threshold: f64,
    #[command(flatten)]
    tuning: TuningArgs,
    #[command(flatten)]
    #[serde(skip)]
    output: Output,
}

#[derive(Args, Serialize)]
struct FeaturizeArgs {
    #[serde(skip)]
    data: PathBuf,
    #[serde(skip)]
    meta: PathBuf,
    /// Featurized CSV; outcome and treatment columns are copied to the end.
    #[arg(long)]
    #[serde(skip)]
    out_csv: PathBuf,
    /// Metadata JSON; defaults to the CSV path with a `.json` extension.
    #[arg(long)]
    #[serde(skip)]
    out_meta: Option<PathBuf>,
    #[arg(long)]
    quadratics: bool,
    #[arg(long)]
    interactions: bool,
    #[arg(long, default_value_t = 0.95)]
    corr_threshold: f64,
    #[arg(long, default_value_t = 20)]
    min_ones: usize,
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Compute(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Compute(_) => 3,
        }
    }
}

impl From<AteError> for CliError {
    fn from(e: AteError) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Compute(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("output serializes");
    out.push(b'\n');
    out
}

fn emit<T: Serialize>(output: &Output, value: &T, table: impl FnOnce() -> String) -> CliResult<()> {
    let json = to_json(value);
    match &output.out_json {
        Some(path) => write_bytes(path, &json)?,
        None if !output.table => print!("{}", String::from_utf8(json).expect("json is utf-8")),
        None => {}
    }
    if output.table {
        print!("{}", table());
    }
    Ok(())
}

fn load(data: &Path, meta: &Path) -> CliResult<(Table, DataMeta, Vec<u8>, Vec<u8>)> {
    let data_bytes = read_bytes(data)?;
    let meta_bytes = read_bytes(meta)?;
    let table = Table::from_reader(data_bytes.as_slice())?;
    let meta = DataMeta::from_reader(meta_bytes.as_slice())?;
    Ok((table, meta, data_bytes, meta_bytes))
}

#[derive(Serialize)]
struct MethodFailure {
    method: Method,
    error: String,
}

#[derive(Serialize)]
struct CvCurves {
    method: Method,
    treated: CvResult,
    control: CvResult,
}

#[derive(Serialize)]
struct EstimateOutput {
    manifest: RunManifest,
    reports: Vec<AteReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failures: Vec<MethodFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<Vec<CvCurves>>,
}

fn estimate(args: EstimateArgs) -> CliResult<()> {
    let (table, meta, data_bytes, meta_bytes) = load(&args.data, &args.meta)?;
    let (sample, names) = table.sample(&meta)?;
    if !(args.ci_level > 0.0 && args.ci_level < 1.0) {
        return Err(CliError::Input(format!("ci-level must lie in (0, 1), got {}", args.ci_level)));
    }
    let opts = EstimationOptions {
        ci_level: args.ci_level,
        df_adjust: !args.no_df_adjust,
        tuning: args.tuning.tuning(args.seed),
    };
    let kinds = CvKinds {
        lasso: args.methods.contains(&Method::CvLasso),
        lasso_ols: args.methods.contains(&Method::CvLassoOls),
    };
    let family = (kinds.lasso || kinds.lasso_ols).then(|| lasso_family(&sample, &opts, kinds));

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut curves = Vec::new();
    let mut first_error: Option<AteError> = None;
    for &method in &args.methods {
        let result = match method {
            Method::Unadjusted => ate_unadjusted(&sample, &opts),
            Method::Ols => ate_ols(&sample, &opts),
            Method::CvLasso | Method::CvLassoOls => match family.as_ref().expect("family requested") {
                Ok((lasso, lasso_ols)) => {
                    let fit = if method == Method::CvLasso { lasso } else { lasso_ols };
                    match fit.as_ref().expect("method requested") {
                        Ok(fit) => {
                            curves.push(CvCurves {
                                method,
                                treated: fit.cv_treated.clone(),
                                control: fit.cv_control.clone(),
                            });
                            Ok(fit.report.clone())
                        }
                        Err(e) => Err(e.clone()),
                    }
                }
                Err(e) => Err(e.clone()),
            },
        };
        match result {
            Ok(r) => reports.push(r.with_names(&names)),
            Err(e) => {
                failures.push(MethodFailure {
                    method,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }

    let manifest = RunManifest::new("estimate", &args, &[&data_bytes, &meta_bytes], Some(args.seed));
    let out = EstimateOutput {
        manifest,
        reports,
        failures,
        cv: args.emit_cv.then_some(curves),
    };
    emit(&args.output, &out, || {
        let failed: Vec<(String, String)> =
            out.failures.iter().map(|f| (f.method.label().to_string(), f.error.clone())).collect();
        render::estimates(&out.reports, &failed)
    })?;
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn parse_config(path: &Path, bytes: &[u8], seed: u64) -> CliResult<SimulationConfig> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let mut value: serde_json::Value = if is_toml {
        toml::from_str(text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Input(format!("{}: configuration must be a table", path.display())))?;
    obj.insert("seed".into(), seed.into());
    let config: SimulationConfig =
        serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    if let Some(t) = flag {
        return Ok(t);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

#[derive(Serialize)]
struct SimulateOutput {
    manifest: RunManifest,
    config: SimulationConfig,
    summary: MonteCarloSummary,
}

fn simulate(args: SimulateArgs) -> CliResult<()> {
    let bytes = read_bytes(&args.config)?;
    let config = parse_config(&args.config, &bytes, args.seed)?;
    let threads = thread_count(args.threads)?;
    let population = generate_population(&config)?;
    let run = run_monte_carlo_with_threads(&population, &config, threads)?;
    if let Some(path) = &args.out_csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &run.records {
            w.serialize(r).map_err(|e| CliError::Compute(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Compute(e.to_string()))?;
        write_bytes(path, &bytes)?;
    }
    let manifest = RunManifest::new("simulate", &config, &[], Some(config.seed));
    let out = SimulateOutput {
        manifest,
        config,
        summary: run.summary,
    };
    emit(&args.output, &out, || render::simulation(&out.summary))
}

#[derive(Serialize)]
struct DiagnoseOutput {
    manifest: RunManifest,
    covariates: Vec<String>,
    report: DiagnosticsReport,
}

fn diagnose_cmd(args: DiagnoseArgs) -> CliResult<()> {
    let (table, meta, data_bytes, meta_bytes) = load(&args.data, &args.meta)?;
    let (sample, names) = table.sample(&meta)?;
    if args.bootstrap == 0 {
        return Err(CliError::Input("bootstrap must be at least 1".into()));
    }
    let opts = DiagnosticsOptions {
        bootstrap: args.bootstrap,
        threshold: args.threshold,
        seed: args.seed,
        tuning: args.tuning.tuning(args.seed),
        fourth_moment_threshold: args.fourth_moment_threshold,
        ..DiagnosticsOptions::default()
    };
    let report = diagnose(&sample, &opts)?;
    let manifest = RunManifest::new("diagnose", &args, &[&data_bytes, &meta_bytes], Some(args.seed));
    let out = DiagnoseOutput {
        manifest,
        covariates: names,
        report,
    };
    emit(&args.output, &out, || render::diagnostics(&out.report, &out.covariates))
}

#[derive(Serialize)]
struct FeaturizeMetadata {
    manifest: RunManifest,
    #[serde(flatten)]
    metadata: DesignMetadata,
}

fn featurize(args: FeaturizeArgs) -> CliResult<()> {
    let (table, meta, data_bytes, meta_bytes) = load(&args.data, &args.meta)?;
    let raw = table.covariates(&meta)?;
    let opts = FeaturizeOptions {
        include_quadratics: args.quadratics,
        include_interactions: args.interactions,
        corr_threshold: args.corr_threshold,
        min_ones: args.min_ones,
        standardize: !args.no_standardize,
    };
    let design = build_design_matrix(&raw, &opts)?;
    for w in design.warnings() {
        eprintln!("warning: {w}");
    }
    let mut passthrough = Vec::new();
    for name in [meta.outcome.as_deref(), meta.treatment.as_deref()].into_iter().flatten() {
        passthrough.push((name, table.column(name)?));
    }
    let mut csv_bytes = Vec::new();
    write_design_csv(&mut csv_bytes, &design, &passthrough)?;
    write_bytes(&args.out_csv, &csv_bytes)?;
    let meta_path = args.out_meta.clone().unwrap_or_else(|| args.out_csv.with_extension("json"));
    let manifest = RunManifest::new("featurize", &args, &[&data_bytes, &meta_bytes], None);
    let out = FeaturizeMetadata {
        manifest,
        metadata: DesignMetadata::new(&design, &raw, &meta),
    };
    write_bytes(&meta_path, &to_json(&out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate(a),
        Command::Diagnose(a) => diagnose_cmd(a),
        Command::Featurize(a) => featurize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Input(m) => eprintln!("error: {m}"),
                CliError::Compute(m) => eprintln!("computation failed: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}

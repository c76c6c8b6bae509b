//! `carma-hawkes` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid arguments or input, 2 invalid model,
//! 3 numerical failure. Errors are printed to stderr as one JSON object.

mod io;
mod study;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use carma_hawkes::inference::{
    acf_confidence, bin_events, default_lags, mle_fit, mme_fit, residual_ks, MleOptions, MmeOptions,
};
use carma_hawkes::model::check_validity;
use carma_hawkes::moments::{LagConvention, MomentEngine};
use carma_hawkes::simulate::{simulate_path, SimConfig};
use carma_hawkes::{Error, ModelSpec, ValidityReport};
use clap::parser::ValueSource;
use clap::{ArgGroup, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::io::{manifest_path, RunManifest};

#[derive(Parser)]
#[command(name = "carma-hawkes", version, about = "Simulate, analyse and fit CARMA(p,q)-Hawkes point processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stationarity, moment-existence and kernel diagnostics for a model.
    Validate(ValidateArgs),
    /// Simulate event times with the exact compensator-inversion sampler.
    Simulate(SimulateArgs),
    /// Long-run covariance and autocorrelation of binned counts.
    Moments(MomentsArgs),
    /// Maximum-likelihood fit.
    FitMle(FitMleArgs),
    /// Two-step moment-matching fit on the autocorrelation of binned counts.
    FitMme(FitMmeArgs),
    /// Empirical autocorrelation of binned counts with confidence bands.
    Acf(AcfArgs),
    /// Time-rescaling residuals and a Kolmogorov-Smirnov test against Exp(1).
    Residuals(ResidualsArgs),
    /// Re-run the simulation study: both models, four horizons, both estimators.
    ReproduceStudy(study::StudyArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
#[command(group(ArgGroup::new("length").required(true).args(["horizon", "events"])))]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    root_tolerance: f64,
    /// Proceed with a model that fails validation.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Unit,
    Adjacent,
}

impl From<Convention> for LagConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Unit => LagConvention::Unit,
            Convention::Adjacent => LagConvention::Adjacent,
        }
    }
}

#[derive(Args)]
struct MomentsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    max_lag: usize,
    /// Gap between consecutive lags, in time units.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FitMleArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    q: usize,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    max_iters: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitMmeArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    q: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Number of autocorrelation lags; defaults to max(20, 2(p+q+1)).
    #[arg(long)]
    lags: Option<usize>,
    #[arg(long, default_value_t = 8)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Convention::Adjacent)]
    convention: Convention,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AcfArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    max_lag: usize,
    /// Add a theoretical_acf column for this model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Bartlett bandwidth; defaults to floor(4 (n/100)^(2/9)).
    #[arg(long)]
    bandwidth: Option<usize>,
    /// End of the observation window; defaults to the last event.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, value_enum, default_value_t = Convention::Adjacent)]
    convention: Convention,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ResidualsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    events: PathBuf,
    /// KS report; the residuals go next to it as `<out>.residuals.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct CliError {
    #[serde(skip)]
    pub code: i32,
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity: Option<Box<ValidityReport>>,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: 1, error: "invalid_input".into(), message: message.into(), validity: None }
    }

    pub fn output(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError { code: 3, error: "io".into(), message: format!("{}: {e}", path.display()), validity: None }
    }

    fn invalid_model(report: ValidityReport) -> Self {
        CliError {
            code: 2,
            error: "invalid_model".into(),
            message: format!("model fails validation: {}", report.diagnostics.join("; ")),
            validity: Some(Box::new(report)),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) | Error::InsufficientData(_) => 1,
            Error::InvalidModel(_) => 2,
            _ => 3,
        };
        CliError { code, error: e.kind().into(), message: e.to_string(), validity: None }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Per-invocation state: the model from a manifest replaces `--model`.
#[derive(Default)]
pub struct Ctx {
    model_override: Option<ModelSpec>,
}

impl Ctx {
    fn model(&self, path: &Path) -> CliResult<ModelSpec> {
        match &self.model_override {
            Some(m) => Ok(m.clone()),
            None => io::read_model(path),
        }
    }
}

/// Rejects a non-stationary model unless forced, in which case it warns.
pub fn require_valid(spec: &ModelSpec, force: bool) -> CliResult<ValidityReport> {
    let report = check_validity(spec)?;
    if !report.stationary {
        if !force {
            return Err(CliError::invalid_model(report));
        }
        eprintln!("warning: continuing with a model that fails validation (--force)");
    }
    Ok(report)
}

fn write_manifest(
    out: &Path,
    command: &str,
    model: Option<&ModelSpec>,
    flags: &BTreeMap<String, String>,
    seed: Option<u64>,
) -> CliResult<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        model: model.cloned(),
        flags: flags.clone(),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    io::write_json(&manifest_path(out), &manifest)
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn validate(ctx: &Ctx, a: &ValidateArgs) -> CliResult<()> {
    let spec = ctx.model(&a.model)?;
    let report = check_validity(&spec)?;
    if a.json {
        print_json(&report);
    } else {
        let br = report.branching_ratio.map_or("undefined".to_string(), |b| format!("{b:.7}"));
        println!("branching ratio     {br}");
        println!("max Re eig A        {:.6}", report.spectrum_a.max_real());
        println!("max Re eig Ã        {:.6}", report.spectrum_a_tilde.max_real());
        println!("max Re eig Ã̃        {:.6}", report.spectrum_a_tilde2.max_real());
        println!("distinct roots      {}", report.eigenvalues_distinct);
        println!("kernel              {}", serde_json::to_string(&report.kernel_verdict).expect("serializable"));
        println!("stationary          {}", report.stationary);
        println!("moments exist       {}", report.moments_exist);
        println!("acf exists          {}", report.acf_exists);
        for d in &report.diagnostics {
            println!("note: {d}");
        }
    }
    if !report.stationary {
        return Err(CliError::invalid_model(report));
    }
    Ok(())
}

fn simulate(ctx: &Ctx, a: &SimulateArgs, flags: &BTreeMap<String, String>) -> CliResult<()> {
    let spec = ctx.model(&a.model)?;
    require_valid(&spec, a.force)?;
    let mut config = match (a.horizon, a.events) {
        (Some(h), _) => SimConfig::horizon(h, a.seed),
        (None, Some(k)) => SimConfig::events(k, a.seed),
        (None, None) => unreachable!("clap enforces one of --horizon/--events"),
    };
    config.root_tolerance = a.root_tolerance;
    let events = simulate_path(&spec, &config)?;
    io::write_events(&a.out, &events)?;
    write_manifest(&a.out, "simulate", Some(&spec), flags, Some(a.seed))?;
    print_json(&serde_json::json!({ "events": events.len(), "last_event": events.last() }));
    Ok(())
}

fn moments(ctx: &Ctx, a: &MomentsArgs, flags: &BTreeMap<String, String>) -> CliResult<()> {
    let spec = ctx.model(&a.model)?;
    require_valid(&spec, a.force)?;
    if !(a.delta >= 0.0) || a.max_lag == 0 {
        return Err(CliError::input("--delta must be non-negative and --max-lag positive"));
    }
    let eng = MomentEngine::new(&spec)?;
    let var = eng.longrun_var(a.tau)?;
    let cov = eng.longrun_cov_ladder(a.tau, a.delta, a.max_lag)?;
    let rows = cov.iter().enumerate().map(|(i, c)| vec![(i + 1).to_string(), c.to_string(), (c / var).to_string()]);
    io::write_csv(&a.out, &["lag", "cov", "acf"], rows)?;
    write_manifest(&a.out, "moments", Some(&spec), flags, None)?;
    print_json(&serde_json::json!({
        "tau": a.tau,
        "delta": a.delta,
        "mean_increment": eng.stationary_mean_increment(a.tau),
        "variance": var,
        "stationary_rate": eng.stationary_rate(),
        "warnings": eng.warnings(),
    }));
    Ok(())
}

fn fit_mle_cmd(a: &FitMleArgs, flags: &BTreeMap<String, String>) -> CliResult<()> {
    let events = io::read_events(&a.events)?;
    let init = a.init.as_deref().map(io::read_model).transpose()?;
    let opts = MleOptions { init: init.clone(), starts: a.starts, seed: a.seed, max_iters: a.max_iters };
    let fit = mle_fit(&events, a.p, a.q, &opts)?;
    if !fit.converged {
        eprintln!("warning: optimizer did not report convergence");
    }
    io::write_json(&a.out, &fit)?;
    write_manifest(&a.out, "fit-mle", init.as_ref(), flags, Some(a.seed))
}

fn fit_mme_cmd(a: &FitMmeArgs, flags: &BTreeMap<String, String>) -> CliResult<()> {
    let events = io::read_events(&a.events)?;
    let lags = a.lags.unwrap_or_else(|| default_lags(a.p, a.q));
    let opts = MmeOptions { starts: a.starts, seed: a.seed, convention: a.convention.into(), ..Default::default() };
    let fit = mme_fit(&events, a.p, a.q, a.tau, lags, &opts)?;
    if !fit.converged {
        eprintln!("warning: optimizer did not report convergence");
    }
    io::write_json(&a.out, &fit)?;
    write_manifest(&a.out, "fit-mme", None, flags, Some(a.seed))
}

fn acf_cmd(ctx: &Ctx, a: &AcfArgs, flags: &BTreeMap<String, String>) -> CliResult<()> {
    let events = io::read_events(&a.events)?;
    let horizon = a.horizon.or(events.last()).unwrap_or(0.0);
    let binned = bin_events(&events, a.tau, horizon)?;
    let band = acf_confidence(&binned, a.max_lag, a.level, a.bandwidth)?;
    let model = a.model.as_deref().map(|p| ctx.model(p)).transpose()?;
    let theory = match &model {
        Some(spec) => {
            require_valid(spec, a.force)?;
            Some(MomentEngine::new(spec)?.acf_with(a.tau, a.max_lag, a.convention.into())?)
        }
        None => None,
    };
    let mut header = vec!["lag", "empirical_acf", "lo", "hi"];
    if theory.is_some() {
        header.push("theoretical_acf");
    }
    let rows = band.iter().enumerate().map(|(i, iv)| {
        let mut row = vec![iv.lag.to_string(), iv.acf.to_string(), iv.lo.to_string(), iv.hi.to_string()];
        if let Some(t) = &theory {
            row.push(t[i].to_string());
        }
        row
    });
    io::write_csv(&a.out, &header, rows)?;
    write_manifest(&a.out, "acf", model.as_ref(), flags, None)
}

fn residuals_cmd(ctx: &Ctx, a: &ResidualsArgs, flags: &BTreeMap<String, String>) -> CliResult<()> {
    let spec = ctx.model(&a.model)?;
    require_valid(&spec, a.force)?;
    let events = io::read_events(&a.events)?;
    let ks = residual_ks(&spec, &events)?;
    let summary = serde_json::json!({ "statistic": ks.statistic, "p_value": ks.p_value, "n": ks.n });
    io::write_json(&a.out, &summary)?;
    let mut csv_path = a.out.as_os_str().to_owned();
    csv_path.push(".residuals.csv");
    let rows = ks.residuals.iter().zip(events.times()).map(|(r, t)| vec![t.to_string(), r.to_string()]);
    io::write_csv(Path::new(&csv_path), &["time", "residual"], rows)?;
    write_manifest(&a.out, "residuals", Some(&spec), flags, None)?;
    print_json(&summary);
    Ok(())
}

/// Flags given on the command line, keyed by argument id.
fn collect_flags(cmd: &clap::Command, sub: &ArgMatches) -> BTreeMap<String, String> {
    let mut flags = BTreeMap::new();
    for id in sub.ids() {
        let is_arg = cmd.get_arguments().any(|a| a.get_id() == id);
        if !is_arg || sub.value_source(id.as_str()) != Some(ValueSource::CommandLine) {
            continue;
        }
        if let Ok(Some(raw)) = sub.try_get_raw(id.as_str()) {
            let v: Vec<String> = raw.map(|s| s.to_string_lossy().into_owned()).collect();
            flags.insert(id.to_string(), v.join(","));
        }
    }
    flags
}

fn replay(a: &ReplayArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| CliError::input(format!("{}: {e}", a.manifest.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::input(e.to_string()))?;
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&manifest.command)
        .filter(|_| manifest.command != "replay")
        .ok_or_else(|| CliError::input(format!("manifest names unknown command {:?}", manifest.command)))?;
    let mut argv: Vec<OsString> = vec!["carma-hawkes".into(), manifest.command.clone().into()];
    for (id, value) in &manifest.flags {
        let arg = sub
            .get_arguments()
            .find(|arg| arg.get_id().as_str() == id)
            .ok_or_else(|| CliError::input(format!("manifest flag {id:?} is not an option of {}", manifest.command)))?;
        let long = format!("--{}", arg.get_long().unwrap_or(id));
        if arg.get_action().takes_values() {
            argv.push(long.into());
            argv.push(value.into());
        } else if value == "true" {
            argv.push(long.into());
        }
    }
    let ctx = Ctx { model_override: manifest.model.clone() };
    run_argv(argv, &ctx)
}

fn run_argv(argv: Vec<OsString>, ctx: &Ctx) -> CliResult<()> {
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError { code: 1, error: "invalid_arguments".into(), message: e.to_string(), validity: None });
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::input(e.to_string()))?;
    let root = Cli::command();
    let flags = matches
        .subcommand()
        .and_then(|(name, sub)| root.find_subcommand(name).map(|cmd| collect_flags(cmd, sub)))
        .unwrap_or_default();
    match &cli.command {
        Command::Validate(a) => validate(ctx, a),
        Command::Simulate(a) => simulate(ctx, a, &flags),
        Command::Moments(a) => moments(ctx, a, &flags),
        Command::FitMle(a) => fit_mle_cmd(a, &flags),
        Command::FitMme(a) => fit_mme_cmd(a, &flags),
        Command::Acf(a) => acf_cmd(ctx, a, &flags),
        Command::Residuals(a) => residuals_cmd(ctx, a, &flags),
        Command::ReproduceStudy(a) => study::run(a, &flags),
        Command::Replay(a) => replay(a),
    }
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("CARMA_HAWKES_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::input(format!("CARMA_HAWKES_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::input(e.to_string()))?;
    }
    Ok(())
}

fn main() {
    let result = init_threads().and_then(|_| run_argv(std::env::args_os().collect(), &Ctx::default()));
    if let Err(e) = result {
        eprintln!("{}", serde_json::to_string(&e).expect("serializable"));
        std::process::exit(e.code);
    }
}

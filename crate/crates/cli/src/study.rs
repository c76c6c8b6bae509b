//! `reproduce-study`: simulate the two reference models at several horizons,
//! fit both estimators to every path, and write tables and figure data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use carma_hawkes::inference::{
    acf_confidence, bin_events, default_lags, mle_fit, mme_fit, FitResult, MleOptions, MmeOptions,
};
use carma_hawkes::moments::{kernel_h, LagConvention, MomentEngine};
use carma_hawkes::simulate::{intensity_path, simulate_path, EventTimes, SimConfig};
use carma_hawkes::ModelSpec;
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use crate::io;
use crate::CliError;

#[derive(Args)]
pub struct StudyArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// One short horizon and two optimizer starts, for smoke runs.
    #[arg(long)]
    pub fast: bool,
    /// Experiment i uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

const HORIZONS: [f64; 4] = [5000.0, 15000.0, 25000.0, 50000.0];
const FAST_HORIZONS: [f64; 1] = [2000.0];
const ACF_LAGS: usize = 20;
const KERNEL_T_MAX: f64 = 30.0;
const KERNEL_STEP: f64 = 0.05;

pub fn hawkes_truth() -> ModelSpec {
    ModelSpec::hawkes(0.2, 0.5, 0.7).expect("valid reference model")
}

pub fn carma_truth() -> ModelSpec {
    let pi2 = std::f64::consts::PI.powi(2);
    ModelSpec::new(0.3, vec![1.3, 0.34 + pi2 / 4.0, 0.025 + 0.025 * pi2], vec![0.2, 0.3])
        .expect("valid reference model")
}

struct Experiment {
    name: &'static str,
    truth: ModelSpec,
    horizon: f64,
    seed: u64,
}

#[derive(Serialize)]
struct ExperimentResult {
    model: &'static str,
    horizon: f64,
    seed: u64,
    n_events: usize,
    truth: ModelSpec,
    mle: FitResult,
    mme: FitResult,
}

fn params(s: &ModelSpec) -> Vec<f64> {
    std::iter::once(s.mu).chain(s.a.iter().copied()).chain(s.b.iter().copied()).collect()
}

fn param_names(s: &ModelSpec) -> Vec<String> {
    let mut names = vec!["μ".to_string()];
    names.extend((1..=s.p()).map(|i| format!("a{i}")));
    names.extend((0..=s.q()).map(|i| format!("b{i}")));
    names
}

fn run_one(ex: &Experiment, starts: usize) -> Result<(ExperimentResult, EventTimes), CliError> {
    let events = simulate_path(&ex.truth, &SimConfig::horizon(ex.horizon, ex.seed))?;
    let (p, q) = (ex.truth.p(), ex.truth.q());
    let mle = mle_fit(&events, p, q, &MleOptions { starts, seed: ex.seed, ..Default::default() })?;
    let mme = mme_fit(
        &events,
        p,
        q,
        1.0,
        default_lags(p, q),
        &MmeOptions { starts, seed: ex.seed, ..Default::default() },
    )?;
    let result = ExperimentResult {
        model: ex.name,
        horizon: ex.horizon,
        seed: ex.seed,
        n_events: events.len(),
        truth: ex.truth.clone(),
        mle,
        mme,
    };
    Ok((result, events))
}

fn fmt_cell(est: f64, se: Option<f64>) -> String {
    match se {
        Some(se) if se.is_finite() => format!("{est:.4} ({se:.4})"),
        _ => format!("{est:.4}"),
    }
}

fn tables(results: &[ExperimentResult]) -> String {
    let mut md = String::from("# Simulation study\n\nEstimates with standard errors in parentheses where available.\n");
    let mut models: Vec<&str> = results.iter().map(|r| r.model).collect();
    models.dedup();
    for model in models {
        let rows: Vec<&ExperimentResult> = results.iter().filter(|r| r.model == model).collect();
        let truth = &rows[0].truth;
        let names = param_names(truth);
        let _ = writeln!(md, "\n## {model}\n");
        let _ = writeln!(md, "| T | events | method | {} | objective |", names.join(" | "));
        let _ = writeln!(md, "|{}", "---|".repeat(names.len() + 4));
        let truth_cells: Vec<String> = params(truth).iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(md, "| | | truth | {} | |", truth_cells.join(" | "));
        for r in rows {
            for fit in [&r.mle, &r.mme] {
                let cells: Vec<String> = params(&fit.spec)
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| fmt_cell(v, fit.stderr.as_ref().map(|s| s[i])))
                    .collect();
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {:.6e} |",
                    r.horizon,
                    r.n_events,
                    fit.method,
                    cells.join(" | "),
                    fit.objective
                );
            }
        }
    }
    md
}

fn write_path_csv(path: &Path, spec: &ModelSpec, events: &EventTimes) -> Result<(), CliError> {
    let lambda = intensity_path(spec, events, events.times())?;
    let rows = events
        .times()
        .iter()
        .zip(lambda)
        .enumerate()
        .map(|(i, (t, l))| vec![t.to_string(), (i + 1).to_string(), l.to_string()]);
    io::write_csv(path, &["time", "count", "intensity"], rows)
}

fn write_acf_csv(path: &Path, truth: &ModelSpec, fit: &ModelSpec, events: &EventTimes, horizon: f64) -> Result<(), CliError> {
    let binned = bin_events(events, 1.0, horizon)?;
    let band = acf_confidence(&binned, ACF_LAGS, 0.95, None)?;
    let theory = MomentEngine::new(truth)?.acf_with(1.0, ACF_LAGS, LagConvention::Adjacent)?;
    let fitted = MomentEngine::new(fit)?.acf_with(1.0, ACF_LAGS, LagConvention::Adjacent)?;
    let rows = band.iter().zip(theory.iter().zip(&fitted)).map(|(iv, (t, f))| {
        vec![iv.lag.to_string(), iv.acf.to_string(), iv.lo.to_string(), iv.hi.to_string(), t.to_string(), f.to_string()]
    });
    io::write_csv(path, &["lag", "empirical_acf", "lo", "hi", "theoretical_acf", "fitted_acf"], rows)
}

fn write_kernel_csv(path: &Path, truth: &ModelSpec, mle: &ModelSpec, mme: &ModelSpec) -> Result<(), CliError> {
    let n = (KERNEL_T_MAX / KERNEL_STEP).round() as usize;
    let mut rows = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = i as f64 * KERNEL_STEP;
        rows.push(vec![
            t.to_string(),
            kernel_h(truth, t)?.to_string(),
            kernel_h(mle, t)?.to_string(),
            kernel_h(mme, t)?.to_string(),
        ]);
    }
    io::write_csv(path, &["t", "truth", "mle", "mme"], rows)
}

pub fn run(args: &StudyArgs, flags: &BTreeMap<String, String>) -> Result<(), CliError> {
    let horizons: &[f64] = if args.fast { &FAST_HORIZONS } else { &HORIZONS };
    let starts = if args.fast { 2 } else { MleOptions::default().starts };
    let mut experiments = Vec::new();
    for (name, truth) in [("hawkes", hawkes_truth()), ("carma31", carma_truth())] {
        for &horizon in horizons {
            let seed = args.seed + experiments.len() as u64;
            experiments.push(Experiment { name, truth: truth.clone(), horizon, seed });
        }
    }
    let outcomes: Vec<_> = experiments.par_iter().map(|ex| run_one(ex, starts)).collect::<Result<_, _>>()?;

    let dir = &args.out;
    for (res, events) in &outcomes {
        let stem = format!("{}_T{}", res.model, res.horizon);
        write_path_csv(&dir.join(format!("path_{stem}.csv")), &res.truth, events)?;
        write_acf_csv(&dir.join(format!("acf_{stem}.csv")), &res.truth, &res.mme.spec, events, res.horizon)?;
    }
    // Kernel figure uses the longest horizon of each model.
    for model in ["hawkes", "carma31"] {
        if let Some((res, _)) = outcomes.iter().filter(|(r, _)| r.model == model).last() {
            write_kernel_csv(&dir.join(format!("kernel_{model}.csv")), &res.truth, &res.mle.spec, &res.mme.spec)?;
        }
    }
    let results: Vec<ExperimentResult> = outcomes.into_iter().map(|(r, _)| r).collect();
    io::write_text(&dir.join("tables.md"), &tables(&results))?;
    io::write_json(&dir.join("fits.json"), &results)?;
    let manifest = io::RunManifest {
        command: "reproduce-study".into(),
        model: None,
        flags: flags.clone(),
        seed: Some(args.seed),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    for r in &results {
        println!(
            "{:<8} T={:<6} n={:<6} mle {:?}  mme {:?}",
            r.model,
            r.horizon,
            r.n_events,
            params(&r.mle.spec).iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            params(&r.mme.spec).iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }
    Ok(())
}

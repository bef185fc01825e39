//! `agecal`: command-line front end for the calendar-ageing GP.

mod output;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use agecal_core::config::load_key_values;
use agecal_core::dataset::{load_cells, load_profiles, write_cells, write_profiles, CapacityCurve};
use agecal_core::forecast::{
    forecast_curve_anchored, linspace, load_anchors, stddev_sweep, update_model, write_forecast,
    write_sweep, SweepAxis, DEFAULT_STEP_DAYS,
};
use agecal_core::gp::{default_pin_value, fit, relevance, FitConfig, GpModel};
use agecal_core::kernel::HyperParam;
use agecal_core::metrics::{evaluate_cell, write_eval_report};
use agecal_core::preprocess::{load_rows, prepare_cell, write_rows, PreprocessConfig, TrainingRow};
use agecal_core::report::fmt6;
use agecal_core::study::{
    builtin_cases, prepare_all, run_case, run_dynamic_update, static_condition, write_case_cells,
    write_case_hyperparameters, write_case_summary, write_dynamic_summary, DynamicUpdateConfig,
    StudyConfig, DEFAULT_UPDATE_DAY,
};
use agecal_core::synth::{default_dataset, parse_synth_config, write_truth};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::output::{create_dir, write_atomic};

const SEED_ENV: &str = "AGECAL_SEED";

#[derive(Parser)]
#[command(
    name = "agecal",
    version,
    about = "Gaussian-process calendar-ageing model for Li-ion cells"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rebase, clean and segment capacity curves, then extract training rows.
    Preprocess(PreprocessArgs),
    /// Fit hyperparameters on training rows and write a model file.
    Train(TrainArgs),
    /// Forecast a capacity curve under a stress profile.
    Predict(PredictArgs),
    /// Score a model against measured cells.
    Evaluate(EvaluateArgs),
    /// Posterior standard deviation along one stress axis.
    Sweep(SweepArgs),
    /// Normalised temperature/SOC relevance of a fitted model.
    Relevance(RelevanceArgs),
    /// Run the built-in incremental training cases.
    Cases(CasesArgs),
    /// Add training rows to a model, optionally refitting.
    Update(UpdateArgs),
    /// Generate the synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PreprocessOpts {
    /// Slope ratio that marks the start of a knee.
    #[arg(long, default_value_t = 2.0)]
    knee_factor: f64,
    /// Slope ratio that marks a slowdown.
    #[arg(long, default_value_t = 0.5)]
    slow_factor: f64,
    /// Noise allowance for slope tests, in robust standard deviations.
    #[arg(long, default_value_t = 3.0)]
    noise_z: f64,
    /// Outlier threshold in robust standard deviations.
    #[arg(long, default_value_t = 4.0)]
    z_thresh: f64,
    /// Training windows in days.
    #[arg(long, value_delimiter = ',', default_values_t = [30.0, 60.0, 90.0])]
    windows: Vec<f64>,
}

impl PreprocessOpts {
    fn config(&self) -> PreprocessConfig {
        let mut cfg = PreprocessConfig::default();
        cfg.segmentation.knee_factor = self.knee_factor;
        cfg.segmentation.slow_factor = self.slow_factor;
        cfg.segmentation.noise_z = self.noise_z;
        cfg.z_thresh = self.z_thresh;
        cfg.windows = self.windows.clone();
        cfg
    }
}

#[derive(Args)]
struct FitOpts {
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    /// Overridden by the AGECAL_SEED environment variable.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FitOpts {
    fn config(&self) -> Result<FitConfig> {
        Ok(FitConfig {
            restarts: self.restarts,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            seed: resolve_seed(self.seed)?,
            ..FitConfig::default()
        })
    }
}

fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}='{v}' is not a non-negative integer")),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(anyhow!("{SEED_ENV}: {e}")),
    }
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    cells: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only use measurements up to this (original) day.
    #[arg(long)]
    until_day: Option<f64>,
    /// Restrict to these cell ids.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[command(flatten)]
    opts: PreprocessOpts,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    rows: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hold a hyperparameter fixed: `name` or `name=value`.
    #[arg(long = "pin")]
    pins: Vec<String>,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    /// Profile to use when the file holds several.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    horizon: f64,
    #[arg(long, default_value_t = DEFAULT_STEP_DAYS)]
    step: f64,
    /// CSV of `day,q_pct` observations to re-anchor on.
    #[arg(long)]
    anchor: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cells: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STEP_DAYS)]
    step: f64,
    #[command(flatten)]
    opts: PreprocessOpts,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    axis: SweepAxis,
    /// Value of the other stress input: `soc=80` or `temperature=25`.
    #[arg(long, value_delimiter = ',')]
    fixed: Vec<String>,
    /// `lo:hi:n`.
    #[arg(long)]
    grid: String,
    #[arg(long, default_value_t = DEFAULT_STEP_DAYS)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RelevanceArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct CasesArgs {
    #[arg(long)]
    cells: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run a single case.
    #[arg(long)]
    case: Option<u8>,
    #[arg(long, default_value_t = DEFAULT_STEP_DAYS)]
    step: f64,
    /// Day up to which dynamic cells feed the model update.
    #[arg(long, default_value_t = DEFAULT_UPDATE_DAY)]
    update_day: f64,
    /// Refit hyperparameters in the dynamic update.
    #[arg(long)]
    refit: bool,
    #[command(flatten)]
    fit: FitOpts,
    #[command(flatten)]
    opts: PreprocessOpts,
}

#[derive(Args)]
struct UpdateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    rows: PathBuf,
    #[arg(long)]
    refit: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Args)]
struct SynthArgs {
    /// key=value file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Relevance(a) => show_relevance(a),
        Command::Cases(a) => cases(a),
        Command::Update(a) => update(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = a.opts.config();
    let cells = load_cells(&a.cells)?;
    let profiles = load_profiles(&a.profiles)?;
    let mut rows: Vec<TrainingRow> = Vec::new();
    let mut phases = Vec::new();
    for cell in &cells {
        if !a.ids.is_empty() && !a.ids.iter().any(|id| id == cell.cell_id()) {
            continue;
        }
        let cell = match a.until_day {
            Some(day) => match cell.truncated(day) {
                Some(c) => c,
                None => {
                    eprintln!(
                        "warning: cell {} has fewer than 2 points before day {day}",
                        cell.cell_id()
                    );
                    continue;
                }
            },
            None => cell.clone(),
        };
        let profile = profiles
            .iter()
            .find(|p| p.cell_id() == cell.cell_id())
            .ok_or_else(|| anyhow!("no stress profile for cell {}", cell.cell_id()))?;
        let prepared = match prepare_cell(&cell, profile, &cfg) {
            Ok(p) => p,
            Err(
                e @ (agecal_core::Error::InsufficientData { .. }
                | agecal_core::Error::EmptyAfterRebase(_)),
            ) => {
                eprintln!("warning: skipping cell {}: {e}", cell.cell_id());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for (p, label) in prepared.curve.points().iter().zip(&prepared.labels) {
            phases.push((
                cell.cell_id().to_owned(),
                p.day + prepared.offset_day,
                p.day,
                p.capacity,
                *label,
            ));
        }
        rows.extend(prepared.rows);
    }
    if rows.is_empty() {
        eprintln!("warning: no training rows were produced");
    }
    create_dir(&a.out)?;
    write_atomic(&a.out.join("rows.csv"), |w| write_rows(w, &rows))?;
    write_atomic(&a.out.join("phases.csv"), |w| {
        writeln!(w, "cell_id,day,rebased_day,capacity,phase")?;
        for (id, day, rebased, q, label) in &phases {
            writeln!(w, "{id},{day},{rebased},{q},{}", label.as_str())?;
        }
        Ok(())
    })?;
    println!(
        "{} rows from {} cells",
        rows.len(),
        phases
            .iter()
            .map(|p| &p.0)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    );
    Ok(())
}

fn parse_pins(specs: &[String]) -> Result<BTreeMap<HyperParam, f64>> {
    let mut pins = BTreeMap::new();
    for spec in specs {
        let (name, value) = match spec.split_once('=') {
            Some((n, v)) => (n, Some(v)),
            None => (spec.as_str(), None),
        };
        let p: HyperParam = name.trim().parse()?;
        let v = match value {
            Some(v) => v
                .trim()
                .parse::<f64>()
                .with_context(|| format!("--pin {spec}: bad value"))?,
            None => default_pin_value(p),
        };
        if pins.insert(p, v).is_some() {
            bail!("--pin {name} given twice");
        }
    }
    Ok(pins)
}

fn train(a: TrainArgs) -> Result<()> {
    let rows = load_rows(&a.rows)?;
    let pins = parse_pins(&a.pins)?;
    let model = fit(&rows, &a.fit.config()?, &pins)?;
    write_atomic(&a.out, |w| w.write_all(model.to_json().as_bytes()))?;
    let h = model.hyperparameters();
    println!(
        "theta_t={} theta_soc={} theta_dt={} sigma_f2={} sigma_n2={} lml={}",
        fmt6(h.theta_t),
        fmt6(h.theta_soc),
        fmt6(h.theta_dt),
        fmt6(h.sigma_f2),
        fmt6(h.sigma_n2),
        fmt6(model.log_marginal_likelihood())
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = GpModel::load(&a.model)?;
    let profiles = load_profiles(&a.profile)?;
    let profile = match &a.cell {
        Some(id) => profiles
            .iter()
            .find(|p| p.cell_id() == id)
            .ok_or_else(|| anyhow!("no profile for cell {id} in {}", a.profile.display()))?,
        None if profiles.len() == 1 => &profiles[0],
        None => bail!(
            "{} holds {} profiles; choose one with --cell",
            a.profile.display(),
            profiles.len()
        ),
    };
    let anchors = match &a.anchor {
        Some(p) => load_anchors(p)?,
        None => Vec::new(),
    };
    let fc = forecast_curve_anchored(&model, profile, a.horizon, a.step, &anchors)?;
    for w in &fc.warnings {
        eprintln!("warning: {w}");
    }
    write_atomic(&a.out, |w| write_forecast(w, &fc))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = GpModel::load(&a.model)?;
    let cells = load_cells(&a.cells)?;
    let profiles = load_profiles(&a.profiles)?;
    let prepared = prepare_all(&cells, &profiles, &a.opts.config())?;
    let evals = prepared
        .iter()
        .map(|c| evaluate_cell(&model, c, a.step))
        .collect::<agecal_core::Result<Vec<_>>>()?;
    write_atomic(&a.out, |w| write_eval_report(w, &evals))
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        bail!("--grid expects lo:hi:n, got '{spec}'");
    };
    let lo: f64 = lo.parse().with_context(|| format!("--grid lo '{lo}'"))?;
    let hi: f64 = hi.parse().with_context(|| format!("--grid hi '{hi}'"))?;
    let n: usize = n.parse().with_context(|| format!("--grid n '{n}'"))?;
    if n == 0 || !(lo.is_finite() && hi.is_finite()) {
        bail!("--grid needs finite bounds and n >= 1");
    }
    Ok(linspace(lo, hi, n))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let model = GpModel::load(&a.model)?;
    let wanted = match a.axis {
        SweepAxis::Temperature => "soc",
        SweepAxis::Soc => "temperature",
    };
    let mut fixed = None;
    for kv in &a.fixed {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--fixed expects key=value, got '{kv}'"))?;
        let v: f64 = v.trim().parse().with_context(|| format!("--fixed {kv}"))?;
        match k.trim() {
            k if k == wanted => fixed = Some(v),
            "dt" => bail!("pass the window with --dt"),
            other => bail!("--fixed {other} does not apply to a {wanted}-fixed sweep"),
        }
    }
    let fixed = fixed.ok_or_else(|| anyhow!("--fixed {wanted}=VALUE is required"))?;
    let grid = parse_grid(&a.grid)?;
    let s = stddev_sweep(&model, a.axis, fixed, &grid, a.dt)?;
    write_atomic(&a.out, |w| write_sweep(w, &s))
}

fn show_relevance(a: RelevanceArgs) -> Result<()> {
    let model = GpModel::load(&a.model)?;
    let r = relevance(&model)?;
    println!("input,share");
    println!("temperature,{}", fmt6(r.temperature));
    println!("soc,{}", fmt6(r.soc));
    Ok(())
}

fn cases(a: CasesArgs) -> Result<()> {
    let cells = load_cells(&a.cells)?;
    let profiles = load_profiles(&a.profiles)?;
    let cfg = StudyConfig {
        fit: a.fit.config()?,
        preprocess: a.opts.config(),
        step: a.step,
    };
    let (static_cells, dynamic_cells): (Vec<CapacityCurve>, Vec<CapacityCurve>) =
        cells.into_iter().partition(|c| {
            profiles
                .iter()
                .find(|p| p.cell_id() == c.cell_id())
                .is_none_or(|p| static_condition(p).is_some())
        });
    let prepared = prepare_all(&static_cells, &profiles, &cfg.preprocess)?;

    let selected: Vec<_> = builtin_cases()
        .into_iter()
        .filter(|c| a.case.is_none_or(|n| n == c.case_id))
        .collect();
    if selected.is_empty() {
        bail!("no built-in case {}", a.case.unwrap_or_default());
    }
    create_dir(&a.out)?;
    let mut reports = Vec::new();
    for case in &selected {
        let report = run_case(case, &prepared, &cfg)?;
        let dir = a.out.join(format!("case_{}", case.case_id));
        create_dir(&dir)?;
        write_atomic(&dir.join("model.json"), |w| {
            w.write_all(report.model.to_json().as_bytes())
        })?;
        write_atomic(&dir.join("cells.csv"), |w| write_case_cells(w, &report))?;
        println!(
            "case {}: training MAE_Q {} validation MAE_Q {}",
            case.case_id,
            agecal_core::report::fmt6_opt(report.training.q.map(|s| s.mae)),
            agecal_core::report::fmt6_opt(report.validation.q.map(|s| s.mae)),
        );
        reports.push(report);
    }
    write_atomic(&a.out.join("summary.csv"), |w| {
        write_case_summary(w, &reports)
    })?;
    write_atomic(&a.out.join("hyperparameters.csv"), |w| {
        write_case_hyperparameters(w, &reports)
    })?;

    // The update experiment starts from the richest model that was fitted.
    if !dynamic_cells.is_empty() {
        let base = reports.last().expect("at least one case ran");
        let dcfg = DynamicUpdateConfig {
            update_day: a.update_day,
            refit: a.refit,
            step: a.step,
            preprocess: cfg.preprocess.clone(),
            fit: cfg.fit.clone(),
            ..DynamicUpdateConfig::default()
        };
        let dyn_profiles: Vec<_> = profiles
            .iter()
            .filter(|p| dynamic_cells.iter().any(|c| c.cell_id() == p.cell_id()))
            .cloned()
            .collect();
        let report = run_dynamic_update(&base.model, &dynamic_cells, &dyn_profiles, &dcfg)?;
        let dir = a.out.join("dynamic");
        create_dir(&dir)?;
        write_atomic(&dir.join("summary.csv"), |w| {
            write_dynamic_summary(w, &report)
        })?;
        write_atomic(&dir.join("model.json"), |w| {
            w.write_all(report.model.to_json().as_bytes())
        })?;
        write_atomic(&dir.join("rows.csv"), |w| write_rows(w, &report.new_rows))?;
        for (name, (before, after)) in [
            ("temperature", &report.temperature_sweep),
            ("soc", &report.soc_sweep),
        ] {
            write_atomic(&dir.join(format!("sweep_{name}_before.csv")), |w| {
                write_sweep(w, before)
            })?;
            write_atomic(&dir.join(format!("sweep_{name}_after.csv")), |w| {
                write_sweep(w, after)
            })?;
        }
        println!(
            "dynamic update: {} new rows from {} cells",
            report.new_rows.len(),
            dynamic_cells.len()
        );
    }
    Ok(())
}

fn update(a: UpdateArgs) -> Result<()> {
    let model = GpModel::load(&a.model)?;
    let rows = load_rows(&a.rows)?;
    let updated = update_model(&model, &rows, a.refit, &a.fit.config()?)?;
    write_atomic(&a.out, |w| w.write_all(updated.to_json().as_bytes()))?;
    println!(
        "{} training rows ({} added)",
        updated.rows().len(),
        rows.len()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let map = match &a.config {
        Some(p) => load_key_values(p)?,
        None => BTreeMap::new(),
    };
    let (mut cfg, layout) = parse_synth_config(&map)?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}='{v}' is not a non-negative integer"))?;
    }
    let data = default_dataset(&cfg, &layout)?;
    create_dir(&a.out)?;
    let cells = a.out.join("cells.csv");
    let profiles = a.out.join("profiles.csv");
    write_atomic(&cells, |w| write_cells(w, &data.cells))?;
    write_atomic(&profiles, |w| write_profiles(w, &data.profiles))?;
    write_atomic(&a.out.join("truth.csv"), |w| write_truth(w, &data.truth))?;
    println!("{} cells written to {}", data.cells.len(), a.out.display());
    Ok(())
}

//! Iterative capacity forecasting, model updating and uncertainty sweeps.
//!
//! A forecast walks a fixed day grid and adds the predicted loss of every step
//! to the running capacity. Each step's latent variance is summed as if steps
//! were independent, so bands are a lower bound on the true spread.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{StressProfile, KELVIN_OFFSET};
use crate::error::{Error, Result};
use crate::gp::{fit_with_starts, predict, FitConfig, GpModel};
use crate::kernel::InputVector;
use crate::preprocess::TrainingRow;
use crate::report::fmt6;

pub const DEFAULT_STEP_DAYS: f64 = 30.0;

/// Grid days within this distance of the horizon still count as inside it.
const GRID_EPS: f64 = 1e-9;

/// Predicted capacity curve in percent of the reference capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityForecast {
    pub days: Vec<f64>,
    pub mean_q: Vec<f64>,
    pub lower_q: Vec<f64>,
    pub upper_q: Vec<f64>,
    pub step_days: f64,
    pub warnings: Vec<String>,
}

impl CapacityForecast {
    /// One-sigma half-width of the band at every grid day.
    pub fn sigma(&self) -> Vec<f64> {
        self.upper_q
            .iter()
            .zip(&self.mean_q)
            .map(|(u, m)| (u - m) / 2.0)
            .collect()
    }

    pub fn last_day(&self) -> f64 {
        *self.days.last().expect("forecast has at least two days")
    }
}

/// Observed capacity (percent) used to reset the running forecast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub day: f64,
    pub q_pct: f64,
}

/// Open-loop forecast from 100 % at day 0.
pub fn forecast_curve(
    model: &GpModel,
    profile: &StressProfile,
    horizon: f64,
    step: f64,
) -> Result<CapacityForecast> {
    forecast_curve_anchored(model, profile, horizon, step, &[])
}

/// Forecast that snaps the running mean to each anchor at the first grid day
/// at or after it, clearing the accumulated variance there.
pub fn forecast_curve_anchored(
    model: &GpModel,
    profile: &StressProfile,
    horizon: f64,
    step: f64,
    anchors: &[Anchor],
) -> Result<CapacityForecast> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!(
            "step must be positive, got {step}"
        )));
    }
    if !(horizon >= step && horizon.is_finite()) {
        return Err(Error::Parameter(format!(
            "horizon {horizon} is shorter than step {step}"
        )));
    }
    if !profile.covers(0.0, horizon) {
        return Err(Error::Coverage(format!(
            "profile {} covers [0, {}] but the forecast needs [0, {horizon}]",
            profile.cell_id(),
            profile.end_day()
        )));
    }
    let n_steps = ((horizon + GRID_EPS) / step).floor() as usize;
    let days: Vec<f64> = (0..=n_steps).map(|k| k as f64 * step).collect();

    // Every sub-step across the whole horizon goes into one batched query.
    let mut queries = Vec::new();
    let mut owner = Vec::new();
    for k in 0..n_steps {
        let end = days[k + 1].min(profile.end_day());
        for (a, b, seg) in profile.pieces(days[k], end)? {
            queries.push(InputVector::new(seg.inv_temp(), seg.soc, b - a));
            owner.push(k);
        }
    }
    let post = predict(model, &queries, false)?;
    let mut step_mean = vec![0.0; n_steps];
    let mut step_var = vec![0.0; n_steps];
    for (i, &k) in owner.iter().enumerate() {
        step_mean[k] += post.mean[i];
        step_var[k] += post.var[i];
    }

    let mut anchors: Vec<Anchor> = anchors.to_vec();
    anchors.sort_by(|a, b| a.day.total_cmp(&b.day));
    let mut next_anchor = 0;

    let mut mean_q = Vec::with_capacity(days.len());
    let mut var_acc = Vec::with_capacity(days.len());
    let (mut q, mut v) = (100.0, 0.0);
    for (k, &day) in days.iter().enumerate() {
        if k > 0 {
            q += step_mean[k - 1];
            v += step_var[k - 1];
        }
        while next_anchor < anchors.len() && anchors[next_anchor].day <= day + GRID_EPS {
            q = anchors[next_anchor].q_pct;
            v = 0.0;
            next_anchor += 1;
        }
        mean_q.push(q);
        var_acc.push(v);
    }
    let half: Vec<f64> = var_acc.iter().map(|v| 2.0 * v.sqrt()).collect();

    let mut warnings = Vec::new();
    let windows = model.training_windows();
    if !windows.iter().any(|w| (w - step).abs() <= GRID_EPS) {
        warnings.push(format!(
            "step {} days is not a training window ({}); relying on linear extrapolation in dt",
            fmt6(step),
            windows
                .iter()
                .map(|w| fmt6(*w))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    if next_anchor < anchors.len() {
        warnings.push(format!(
            "{} anchor(s) after the last grid day were ignored",
            anchors.len() - next_anchor
        ));
    }

    Ok(CapacityForecast {
        lower_q: mean_q.iter().zip(&half).map(|(m, h)| m - h).collect(),
        upper_q: mean_q.iter().zip(&half).map(|(m, h)| m + h).collect(),
        days,
        mean_q,
        step_days: step,
        warnings,
    })
}

/// New model trained on the union of the current rows and `new_rows`.
///
/// Without `refit` the hyperparameters are kept and only the factorization is
/// rebuilt. With `refit` the optimizer is warm-started from the current values
/// and spends the remaining `cfg.restarts - 1` runs on random starts.
pub fn update_model(
    model: &GpModel,
    new_rows: &[TrainingRow],
    refit: bool,
    cfg: &FitConfig,
) -> Result<GpModel> {
    if new_rows.is_empty() && !refit {
        return Ok(model.clone());
    }
    let mut rows = model.rows().to_vec();
    rows.extend_from_slice(new_rows);
    let h = model.hyperparameters();
    if refit {
        let pinned: BTreeMap<_, _> = h.pinned.iter().map(|&p| (p, h.get(p))).collect();
        fit_with_starts(&rows, cfg, &pinned, std::slice::from_ref(h))
    } else {
        GpModel::new(rows, h.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Grid values in °C; the fixed value is SOC in percent.
    Temperature,
    /// Grid values in percent SOC; the fixed value is temperature in °C.
    Soc,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(SweepAxis::Temperature),
            "soc" => Ok(SweepAxis::Soc),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}' (temperature|soc)"
            ))),
        }
    }
}

/// Latent posterior std of ΔQ along one stress axis, the other held at `fixed`.
pub fn stddev_sweep(
    model: &GpModel,
    axis: SweepAxis,
    fixed: f64,
    grid: &[f64],
    dt: f64,
) -> Result<Vec<(f64, f64)>> {
    if grid.is_empty() {
        return Err(Error::Parameter("sweep grid is empty".into()));
    }
    let x: Vec<InputVector> = grid
        .iter()
        .map(|&g| match axis {
            SweepAxis::Temperature => InputVector::new(1.0 / (g + KELVIN_OFFSET), fixed, dt),
            SweepAxis::Soc => InputVector::new(1.0 / (fixed + KELVIN_OFFSET), g, dt),
        })
        .collect();
    let post = predict(model, &x, false)?;
    Ok(grid.iter().copied().zip(post.std).collect())
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn write_forecast<W: Write>(mut out: W, fc: &CapacityForecast) -> std::io::Result<()> {
    writeln!(out, "day,mean_q_pct,lower_q_pct,upper_q_pct")?;
    for i in 0..fc.days.len() {
        writeln!(
            out,
            "{},{},{},{}",
            fmt6(fc.days[i]),
            fmt6(fc.mean_q[i]),
            fmt6(fc.lower_q[i]),
            fmt6(fc.upper_q[i])
        )?;
    }
    Ok(())
}

pub fn write_sweep<W: Write>(mut out: W, sweep: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(out, "axis_value,posterior_std_pct")?;
    for (g, s) in sweep {
        writeln!(out, "{},{}", fmt6(*g), fmt6(*s))?;
    }
    Ok(())
}

/// Reads `day,q_pct` anchor rows.
pub fn read_anchors<R: Read>(input: R) -> Result<Vec<Anchor>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["day", "q_pct"] {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header 'day,q_pct', got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut anchors = Vec::new();
    for rec in rdr.deserialize::<Anchor>() {
        let a = rec.map_err(csv_err)?;
        if !(a.day.is_finite() && a.q_pct.is_finite()) {
            return Err(Error::Data(format!("non-finite anchor {a:?}")));
        }
        anchors.push(a);
    }
    Ok(anchors)
}

pub fn load_anchors(path: impl AsRef<Path>) -> Result<Vec<Anchor>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_anchors(file)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

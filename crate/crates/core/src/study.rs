//! Incremental training cases over the static test matrix and the dynamic
//! model-update experiment.

use std::collections::BTreeMap;
use std::io::Write;

use crate::dataset::{CapacityCurve, StressProfile};
use crate::error::{Error, Result};
use crate::forecast::{
    forecast_curve, linspace, stddev_sweep, update_model, SweepAxis, DEFAULT_STEP_DAYS,
};
use crate::gp::{fit, relevance, FitConfig, GpModel, Relevance, PINNED_THETA_SOC};
use crate::kernel::{HyperParam, Hyperparameters};
use crate::metrics::{evaluate_cell, q_pairs, CellEvaluation, MetricSet};
use crate::preprocess::{prepare_cell, PreparedCell, PreprocessConfig, TrainingRow};
use crate::report::{fmt6, fmt6_opt};
use crate::synth::STATIC_CONDITIONS;

/// Storage condition as (°C, SOC %).
pub type ConditionKey = (f64, f64);

const CONDITION_TOL: f64 = 1e-6;

fn same_condition(a: ConditionKey, b: ConditionKey) -> bool {
    (a.0 - b.0).abs() < CONDITION_TOL && (a.1 - b.1).abs() < CONDITION_TOL
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCase {
    pub case_id: u8,
    pub conditions: Vec<ConditionKey>,
    pub validation: Vec<ConditionKey>,
}

/// Seven nested cases: temperature extremes at 80 % first, then the middle
/// temperature, then SOC levels in the order 50, 100, 20, 65, 35.
pub fn builtin_cases() -> Vec<TrainingCase> {
    let additions: [&[ConditionKey]; 7] = [
        &[(25.0, 80.0), (45.0, 80.0)],
        &[(35.0, 80.0)],
        &[(25.0, 50.0), (35.0, 50.0), (45.0, 50.0)],
        &[(35.0, 100.0)],
        &[(35.0, 20.0)],
        &[(35.0, 65.0)],
        &[(35.0, 35.0)],
    ];
    let mut conditions: Vec<ConditionKey> = Vec::new();
    additions
        .iter()
        .enumerate()
        .map(|(i, add)| {
            conditions.extend_from_slice(add);
            let validation = STATIC_CONDITIONS
                .iter()
                .copied()
                .filter(|c| !conditions.iter().any(|d| same_condition(*c, *d)))
                .collect();
            TrainingCase {
                case_id: i as u8 + 1,
                conditions: conditions.clone(),
                validation,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub fit: FitConfig,
    pub preprocess: PreprocessConfig,
    pub step: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            fit: FitConfig::default(),
            preprocess: PreprocessConfig::default(),
            step: DEFAULT_STEP_DAYS,
        }
    }
}

/// Pairs cells with their profiles by id and runs the preprocessing chain.
pub fn prepare_all(
    cells: &[CapacityCurve],
    profiles: &[StressProfile],
    cfg: &PreprocessConfig,
) -> Result<Vec<PreparedCell>> {
    cells
        .iter()
        .map(|c| {
            let profile = find_profile(profiles, c.cell_id())?;
            prepare_cell(c, profile, cfg)
        })
        .collect()
}

fn find_profile<'a>(profiles: &'a [StressProfile], id: &str) -> Result<&'a StressProfile> {
    profiles
        .iter()
        .find(|p| p.cell_id() == id)
        .ok_or_else(|| Error::Coverage(format!("no stress profile for cell {id}")))
}

/// Storage condition of a static cell; `None` for dynamic profiles.
pub fn static_condition(profile: &StressProfile) -> Option<ConditionKey> {
    profile.is_static().then(|| {
        let s = profile.segments()[0];
        (s.temp_c(), s.soc)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Training,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Validation => "validation",
        }
    }
}

/// Unweighted means over the cells that produced each metric set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub dq: Option<MetricSet>,
    pub q: Option<MetricSet>,
}

fn mean_set(sets: impl Iterator<Item = MetricSet>) -> Option<MetricSet> {
    let v: Vec<MetricSet> = sets.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(MetricSet {
        mae: v.iter().map(|s| s.mae).sum::<f64>() / n,
        rmse: v.iter().map(|s| s.rmse).sum::<f64>() / n,
        cs2sigma: v.iter().map(|s| s.cs2sigma).sum::<f64>() / n,
    })
}

pub fn aggregate<'a>(cells: impl Iterator<Item = &'a CellEvaluation> + Clone) -> Aggregate {
    Aggregate {
        dq: mean_set(cells.clone().filter_map(|c| c.dq)),
        q: mean_set(cells.filter_map(|c| c.q)),
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub case_id: u8,
    pub cells: Vec<(Split, CellEvaluation)>,
    pub training: Aggregate,
    pub validation: Aggregate,
    pub all: Aggregate,
    pub hyperparameters: Hyperparameters,
    pub relevance: Option<Relevance>,
    pub soc_pinned: bool,
    pub model: GpModel,
}

/// Fits on the case's training cells and evaluates every static cell in the
/// case's training and validation sets.
pub fn run_case(
    case: &TrainingCase,
    prepared: &[PreparedCell],
    cfg: &StudyConfig,
) -> Result<CaseReport> {
    let keyed: Vec<(ConditionKey, &PreparedCell)> = prepared
        .iter()
        .filter_map(|c| static_condition(&c.profile).map(|k| (k, c)))
        .collect();
    let in_set = |set: &[ConditionKey], k: ConditionKey| set.iter().any(|c| same_condition(*c, k));

    let missing: Vec<String> = case
        .conditions
        .iter()
        .chain(&case.validation)
        .filter(|c| !keyed.iter().any(|(k, _)| same_condition(*k, **c)))
        .map(|(t, s)| format!("({t} °C, {s} %)"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(format!(
            "case {}: no cells for {}",
            case.case_id,
            missing.join(", ")
        )));
    }

    let rows: Vec<TrainingRow> = keyed
        .iter()
        .filter(|(k, _)| in_set(&case.conditions, *k))
        .flat_map(|(_, c)| c.rows.iter().cloned())
        .collect();
    let soc_pinned = single_soc(&rows);
    let pinned: BTreeMap<HyperParam, f64> = if soc_pinned {
        BTreeMap::from([(HyperParam::ThetaSoc, PINNED_THETA_SOC)])
    } else {
        BTreeMap::new()
    };
    let model = fit(&rows, &cfg.fit, &pinned)?;

    let mut cells = Vec::new();
    for (k, c) in &keyed {
        let split = if in_set(&case.conditions, *k) {
            Split::Training
        } else if in_set(&case.validation, *k) {
            Split::Validation
        } else {
            continue;
        };
        cells.push((split, evaluate_cell(&model, c, cfg.step)?));
    }
    let of = |s: Split| cells.iter().filter(move |(x, _)| *x == s).map(|(_, e)| e);
    let report = CaseReport {
        case_id: case.case_id,
        training: aggregate(of(Split::Training)),
        validation: aggregate(of(Split::Validation)),
        all: aggregate(cells.iter().map(|(_, e)| e)),
        hyperparameters: model.hyperparameters().clone(),
        relevance: match relevance(&model) {
            Ok(r) => Some(r),
            Err(Error::UndefinedRelevance) => None,
            Err(e) => return Err(e),
        },
        soc_pinned,
        cells,
        model,
    };
    Ok(report)
}

fn single_soc(rows: &[TrainingRow]) -> bool {
    rows.first()
        .is_some_and(|r0| rows.iter().all(|r| r.soc == r0.soc))
}

const SUMMARY_HEADER: &str =
    "case_id,split,mae_dq_pct,rmse_dq_pct,cs2sigma_dq_pct,mae_q_pct,rmse_q_pct,cs2sigma_q_pct";

/// One line per case and split, `-` where a split has no cells.
pub fn write_case_summary<W: Write>(mut out: W, reports: &[CaseReport]) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in reports {
        for (name, agg) in [
            ("training", r.training),
            ("validation", r.validation),
            ("all", r.all),
        ] {
            let m = |s: Option<MetricSet>, f: fn(&MetricSet) -> f64| fmt6_opt(s.as_ref().map(f));
            writeln!(
                out,
                "{},{name},{},{},{},{},{},{}",
                r.case_id,
                m(agg.dq, |s| s.mae),
                m(agg.dq, |s| s.rmse),
                m(agg.dq, |s| s.cs2sigma),
                m(agg.q, |s| s.mae),
                m(agg.q, |s| s.rmse),
                m(agg.q, |s| s.cs2sigma),
            )?;
        }
    }
    Ok(())
}

pub fn write_case_hyperparameters<W: Write>(
    mut out: W,
    reports: &[CaseReport],
) -> std::io::Result<()> {
    writeln!(
        out,
        "case_id,theta_t,theta_soc,theta_dt,sigma_f2,sigma_n2,soc_pinned,relevance_temperature,relevance_soc"
    )?;
    for r in reports {
        let h = &r.hyperparameters;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.case_id,
            fmt6(h.theta_t),
            fmt6(h.theta_soc),
            fmt6(h.theta_dt),
            fmt6(h.sigma_f2),
            fmt6(h.sigma_n2),
            r.soc_pinned,
            fmt6_opt(r.relevance.map(|v| v.temperature)),
            fmt6_opt(r.relevance.map(|v| v.soc)),
        )?;
    }
    Ok(())
}

/// Per-cell metrics of one case with the split each cell belongs to.
pub fn write_case_cells<W: Write>(mut out: W, report: &CaseReport) -> std::io::Result<()> {
    writeln!(out, "cell_id,split,metric,quantity,value")?;
    for (split, c) in &report.cells {
        for (quantity, set) in [("dq", c.dq), ("q", c.q)] {
            let Some(s) = set else { continue };
            for (metric, v) in [("mae", s.mae), ("rmse", s.rmse), ("cs2sigma", s.cs2sigma)] {
                writeln!(
                    out,
                    "{},{},{metric},{quantity},{}",
                    c.cell_id,
                    split.as_str(),
                    fmt6(v)
                )?;
            }
        }
    }
    Ok(())
}

pub const DEFAULT_UPDATE_DAY: f64 = 368.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicUpdateConfig {
    pub update_day: f64,
    pub refit: bool,
    pub step: f64,
    pub preprocess: PreprocessConfig,
    pub fit: FitConfig,
    pub temperature_grid: Vec<f64>,
    pub soc_grid: Vec<f64>,
    pub sweep_dt: f64,
}

impl Default for DynamicUpdateConfig {
    fn default() -> Self {
        DynamicUpdateConfig {
            update_day: DEFAULT_UPDATE_DAY,
            refit: false,
            step: DEFAULT_STEP_DAYS,
            preprocess: PreprocessConfig::default(),
            fit: FitConfig::default(),
            temperature_grid: linspace(10.0, 50.0, 41),
            soc_grid: linspace(0.0, 100.0, 51),
            sweep_dt: DEFAULT_STEP_DAYS,
        }
    }
}

/// Forecast quality of one dynamic cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicEvaluation {
    pub full: CellEvaluation,
    /// Q metrics on measurements after the update day.
    pub tail_q: Option<MetricSet>,
}

#[derive(Clone, Debug)]
pub struct DynamicUpdateReport {
    pub new_rows: Vec<TrainingRow>,
    pub before: Vec<DynamicEvaluation>,
    pub after: Vec<DynamicEvaluation>,
    /// Coldest temperature (°C) among the new rows and the SOC it was held at.
    pub sweep_anchor: Option<ConditionKey>,
    pub temperature_sweep: (Vec<(f64, f64)>, Vec<(f64, f64)>),
    pub soc_sweep: (Vec<(f64, f64)>, Vec<(f64, f64)>),
    pub model: GpModel,
}

/// Rows observed up to `update_day` on each dynamic cell.
pub fn rows_until(
    cells: &[CapacityCurve],
    profiles: &[StressProfile],
    update_day: f64,
    cfg: &PreprocessConfig,
) -> Result<Vec<TrainingRow>> {
    let mut rows = Vec::new();
    for c in cells {
        let Some(early) = c.truncated(update_day) else {
            continue;
        };
        let profile = find_profile(profiles, c.cell_id())?;
        rows.extend(prepare_cell(&early, profile, cfg)?.rows);
    }
    Ok(rows)
}

fn evaluate_dynamic(
    model: &GpModel,
    cell: &PreparedCell,
    step: f64,
    tail_from: f64,
) -> Result<DynamicEvaluation> {
    let full = evaluate_cell(model, cell, step)?;
    let tail: Vec<_> = cell
        .linear_points()
        .into_iter()
        .filter(|p| p.day + cell.offset_day > tail_from)
        .collect();
    let last = tail.last().map_or(0.0, |p| p.day);
    let tail_q = if tail.is_empty() || last < step {
        None
    } else {
        let ceil = step * (last / step - 1e-9).ceil();
        let horizon = if cell.profile.covers(0.0, ceil) {
            ceil
        } else {
            last
        };
        let fc = forecast_curve(model, &cell.profile, horizon, step)?;
        let pairs = q_pairs(&fc, &tail);
        (!pairs.is_empty())
            .then(|| MetricSet::from_pairs(&pairs))
            .transpose()?
    };
    Ok(DynamicEvaluation { full, tail_q })
}

/// Evaluates `model` on the dynamic cells, adds their rows observed up to the
/// update day, and evaluates again.
pub fn run_dynamic_update(
    model: &GpModel,
    cells: &[CapacityCurve],
    profiles: &[StressProfile],
    cfg: &DynamicUpdateConfig,
) -> Result<DynamicUpdateReport> {
    let observed = cells
        .iter()
        .map(|c| c.last_day())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(cfg.update_day >= 0.0 && cfg.update_day <= observed) {
        return Err(Error::Range {
            value: cfg.update_day,
            lo: 0.0,
            hi: observed.max(0.0),
        });
    }
    let prepared = prepare_all(cells, profiles, &cfg.preprocess)?;
    let new_rows = rows_until(cells, profiles, cfg.update_day, &cfg.preprocess)?;
    let updated = update_model(model, &new_rows, cfg.refit, &cfg.fit)?;

    let eval_all = |m: &GpModel| -> Result<Vec<DynamicEvaluation>> {
        prepared
            .iter()
            .map(|c| evaluate_dynamic(m, c, cfg.step, cfg.update_day))
            .collect()
    };
    let before = eval_all(model)?;
    let after = eval_all(&updated)?;

    let sweep_anchor = new_rows
        .iter()
        .map(|r| (1.0 / r.inv_temp - crate::dataset::KELVIN_OFFSET, r.soc))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (fixed_soc, fixed_temp) = sweep_anchor.map_or((80.0, 25.0), |(t, s)| (s, t));
    let sweep =
        |m: &GpModel, axis, fixed, grid: &[f64]| stddev_sweep(m, axis, fixed, grid, cfg.sweep_dt);
    let temperature_sweep = (
        sweep(
            model,
            SweepAxis::Temperature,
            fixed_soc,
            &cfg.temperature_grid,
        )?,
        sweep(
            &updated,
            SweepAxis::Temperature,
            fixed_soc,
            &cfg.temperature_grid,
        )?,
    );
    let soc_sweep = (
        sweep(model, SweepAxis::Soc, fixed_temp, &cfg.soc_grid)?,
        sweep(&updated, SweepAxis::Soc, fixed_temp, &cfg.soc_grid)?,
    );
    Ok(DynamicUpdateReport {
        new_rows,
        before,
        after,
        sweep_anchor,
        temperature_sweep,
        soc_sweep,
        model: updated,
    })
}

pub fn write_dynamic_summary<W: Write>(
    mut out: W,
    report: &DynamicUpdateReport,
) -> std::io::Result<()> {
    writeln!(
        out,
        "cell_id,stage,mae_dq_pct,mae_q_pct,cs2sigma_q_pct,tail_mae_q_pct"
    )?;
    for (stage, evals) in [("before", &report.before), ("after", &report.after)] {
        for e in evals {
            writeln!(
                out,
                "{},{stage},{},{},{},{}",
                e.full.cell_id,
                fmt6_opt(e.full.dq.map(|s| s.mae)),
                fmt6_opt(e.full.q.map(|s| s.mae)),
                fmt6_opt(e.full.q.map(|s| s.cs2sigma)),
                fmt6_opt(e.tail_q.map(|s| s.mae)),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_dataset, DatasetLayout, SynthConfig};

    #[test]
    fn cases_are_nested_and_sized() {
        let cases = builtin_cases();
        assert_eq!(cases.len(), 7);
        assert_eq!(cases[0].conditions, vec![(25.0, 80.0), (45.0, 80.0)]);
        assert_eq!(cases[2].conditions.len(), 6);
        assert_eq!(cases[2].conditions.len() * 3, 18);
        for w in cases.windows(2) {
            assert!(w[0].conditions.iter().all(|c| w[1].conditions.contains(c)));
            assert!(w[1].conditions.len() > w[0].conditions.len());
        }
        assert!(cases[6].validation.is_empty());
        for c in &cases {
            assert_eq!(c.conditions.len() + c.validation.len(), 10);
        }
    }

    fn small_study() -> (Vec<PreparedCell>, StudyConfig) {
        let layout = DatasetLayout {
            cells_per_condition: 1,
            dynamic: false,
            ..DatasetLayout::default()
        };
        let data = default_dataset(&SynthConfig::default(), &layout).unwrap();
        let cfg = StudyConfig {
            fit: FitConfig {
                restarts: 2,
                ..FitConfig::default()
            },
            ..StudyConfig::default()
        };
        (
            prepare_all(&data.cells, &data.profiles, &cfg.preprocess).unwrap(),
            cfg,
        )
    }

    #[test]
    fn case_one_pins_soc_and_reports_splits() {
        let (prepared, cfg) = small_study();
        let report = run_case(&builtin_cases()[0], &prepared, &cfg).unwrap();
        assert!(report.soc_pinned);
        assert_eq!(report.hyperparameters.theta_soc, PINNED_THETA_SOC);
        assert_eq!(report.cells.len(), 10);
        assert!(report.relevance.unwrap().soc < 0.01);
        let t = report.training.q.unwrap();
        assert!(t.mae <= t.rmse);
        let mut buf = Vec::new();
        write_case_summary(&mut buf, &[report]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn case_seven_has_empty_validation() {
        let (prepared, cfg) = small_study();
        let report = run_case(&builtin_cases()[6], &prepared, &cfg).unwrap();
        assert!(!report.soc_pinned);
        assert_eq!(report.validation, Aggregate { dq: None, q: None });
        let mut buf = Vec::new();
        write_case_summary(&mut buf, &[report]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().any(|l| l == "7,validation,-,-,-,-,-,-"));
    }

    #[test]
    fn missing_condition_is_a_coverage_error() {
        let (prepared, cfg) = small_study();
        let partial: Vec<PreparedCell> = prepared
            .into_iter()
            .filter(|c| static_condition(&c.profile) != Some((35.0, 20.0)))
            .collect();
        let err = run_case(&builtin_cases()[0], &partial, &cfg).unwrap_err();
        assert!(
            matches!(err, Error::Coverage(ref m) if m.contains("20")),
            "{err}"
        );
    }

    #[test]
    fn update_day_beyond_data_is_a_range_error() {
        let data = default_dataset(&SynthConfig::default(), &DatasetLayout::default()).unwrap();
        let rows = vec![TrainingRow {
            cell_id: "A".into(),
            t_start: 0.0,
            dt: 30.0,
            inv_temp: 1.0 / 298.15,
            soc: 50.0,
            dq: -0.1,
        }];
        let h = Hyperparameters {
            theta_t: 3e-4,
            theta_soc: 30.0,
            theta_dt: 1.0,
            sigma_f2: 1e-5,
            sigma_n2: 1e-3,
            pinned: Default::default(),
        };
        let model = GpModel::new(rows, h).unwrap();
        let cfg = DynamicUpdateConfig {
            update_day: 5000.0,
            ..DynamicUpdateConfig::default()
        };
        let err =
            run_dynamic_update(&model, &data.cells[30..], &data.profiles[30..], &cfg).unwrap_err();
        assert!(matches!(err, Error::Range { .. }));
    }
}

//! Point and calibration metrics for ΔQ predictions and capacity forecasts.

use std::io::Write;

use crate::dataset::CapacityMeasurement;
use crate::error::{Error, Result};
use crate::forecast::{forecast_curve, CapacityForecast};
use crate::gp::{predict, row_input, GpModel};
use crate::kernel::InputVector;
use crate::preprocess::{PreparedCell, TrainingRow};
use crate::report::fmt6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPair {
    pub predicted: f64,
    pub measured: f64,
    /// Predictive standard deviation.
    pub sigma: f64,
}

impl EvalPair {
    pub fn residual(&self) -> f64 {
        self.predicted - self.measured
    }
}

fn non_empty(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        Err(Error::Metric("no prediction/measurement pairs".into()))
    } else {
        Ok(())
    }
}

pub fn rmse(pairs: &[EvalPair]) -> Result<f64> {
    non_empty(pairs)?;
    let ss: f64 = pairs.iter().map(|p| p.residual() * p.residual()).sum();
    Ok((ss / pairs.len() as f64).sqrt())
}

pub fn mae(pairs: &[EvalPair]) -> Result<f64> {
    non_empty(pairs)?;
    Ok(pairs.iter().map(|p| p.residual().abs()).sum::<f64>() / pairs.len() as f64)
}

/// Percentage of pairs with `|predicted - measured| < k·sigma`.
pub fn calibration_score(pairs: &[EvalPair], k: f64) -> Result<f64> {
    non_empty(pairs)?;
    if pairs.iter().any(|p| !(p.sigma >= 0.0)) {
        return Err(Error::Metric("sigma must be non-negative".into()));
    }
    let inside = pairs
        .iter()
        .filter(|p| p.residual().abs() < k * p.sigma)
        .count();
    Ok(100.0 * inside as f64 / pairs.len() as f64)
}

pub fn calibration_score_2sigma(pairs: &[EvalPair]) -> Result<f64> {
    calibration_score(pairs, 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub cs2sigma: f64,
}

impl MetricSet {
    pub fn from_pairs(pairs: &[EvalPair]) -> Result<MetricSet> {
        Ok(MetricSet {
            mae: mae(pairs)?,
            rmse: rmse(pairs)?,
            cs2sigma: calibration_score_2sigma(pairs)?,
        })
    }
}

/// Pairs ΔQ rows with model predictions; sigma includes the noise variance.
pub fn dq_pairs(model: &GpModel, rows: &[TrainingRow]) -> Result<Vec<EvalPair>> {
    let x: Vec<InputVector> = rows.iter().map(row_input).collect();
    let post = predict(model, &x, false)?;
    let noise = model.hyperparameters().sigma_n2;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| EvalPair {
            predicted: post.mean[i],
            measured: r.dq,
            sigma: (post.var[i] + noise).sqrt(),
        })
        .collect())
}

/// Pairs measured capacities (fractions) with the forecast, interpolated
/// linearly to measurement days. Points outside the forecast grid are skipped.
pub fn q_pairs(fc: &CapacityForecast, measurements: &[CapacityMeasurement]) -> Vec<EvalPair> {
    let sigma = fc.sigma();
    let last = fc.last_day();
    measurements
        .iter()
        .filter(|m| m.day >= 0.0 && m.day <= last)
        .map(|m| {
            let k = ((m.day / fc.step_days).floor() as usize).min(fc.days.len() - 2);
            let w = (m.day - fc.days[k]) / (fc.days[k + 1] - fc.days[k]);
            let lerp = |v: &[f64]| v[k] + w * (v[k + 1] - v[k]);
            EvalPair {
                predicted: lerp(&fc.mean_q),
                measured: 100.0 * m.capacity,
                sigma: lerp(&sigma),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellEvaluation {
    pub cell_id: String,
    pub dq: Option<MetricSet>,
    pub q: Option<MetricSet>,
}

/// ΔQ metrics on the cell's rows and Q metrics on its LinearDecline points,
/// forecasting open-loop from the rebased day 0.
pub fn evaluate_cell(model: &GpModel, cell: &PreparedCell, step: f64) -> Result<CellEvaluation> {
    let dq = if cell.rows.is_empty() {
        None
    } else {
        Some(MetricSet::from_pairs(&dq_pairs(model, &cell.rows)?)?)
    };
    let points = cell.linear_points();
    let last = points.last().map_or(0.0, |p| p.day);
    let q = if last < step {
        None
    } else {
        // Extend the grid past the last point when the profile allows it.
        let ceil = step * (last / step - 1e-9).ceil();
        let horizon = if cell.profile.covers(0.0, ceil) {
            ceil
        } else {
            last
        };
        let fc = forecast_curve(model, &cell.profile, horizon, step)?;
        let pairs = q_pairs(&fc, &points);
        if pairs.is_empty() {
            None
        } else {
            Some(MetricSet::from_pairs(&pairs)?)
        }
    };
    Ok(CellEvaluation {
        cell_id: cell.cell_id().to_owned(),
        dq,
        q,
    })
}

pub fn write_eval_report<W: Write>(mut out: W, cells: &[CellEvaluation]) -> std::io::Result<()> {
    writeln!(out, "cell_id,metric,quantity,value")?;
    for c in cells {
        for (quantity, set) in [("dq", c.dq), ("q", c.q)] {
            let Some(s) = set else { continue };
            for (metric, v) in [("mae", s.mae), ("rmse", s.rmse), ("cs2sigma", s.cs2sigma)] {
                writeln!(out, "{},{metric},{quantity},{}", c.cell_id, fmt6(v))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn pairs(residuals: &[f64], sigma: f64) -> Vec<EvalPair> {
        residuals
            .iter()
            .map(|&r| EvalPair {
                predicted: 10.0 + r,
                measured: 10.0,
                sigma,
            })
            .collect()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&pairs(&[0.0, 0.0, 0.0], 1.0)).unwrap(), 0.0);
        assert!((rmse(&pairs(&[3.0, 4.0], 1.0)).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&pairs(&[-2.0], 1.0)).unwrap(), 2.0);
        assert!(matches!(rmse(&[]), Err(Error::Metric(_))));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&pairs(&[1.0, -1.0], 1.0)).unwrap(), 1.0);
        assert!((mae(&pairs(&[0.5, 1.5, 1.0], 1.0)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mae(&pairs(&[0.0, 0.0], 1.0)).unwrap(), 0.0);
        assert!(matches!(mae(&[]), Err(Error::Metric(_))));
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(
            calibration_score_2sigma(&pairs(&[0.0, 0.0], 0.1)).unwrap(),
            100.0
        );
        let boundary = [EvalPair {
            predicted: 2.0,
            measured: 0.0,
            sigma: 1.0,
        }];
        assert_eq!(calibration_score_2sigma(&boundary).unwrap(), 0.0);
        assert_eq!(
            calibration_score_2sigma(&pairs(&[0.1, -0.5, 1.0, 3.0], 1.0)).unwrap(),
            75.0
        );
        assert!(matches!(
            calibration_score_2sigma(&[]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn gaussian_residuals_hit_two_sigma_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma = 0.7;
        let p: Vec<EvalPair> = (0..100_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                EvalPair {
                    predicted: sigma * z,
                    measured: 0.0,
                    sigma,
                }
            })
            .collect();
        let cs = calibration_score_2sigma(&p).unwrap();
        assert!((cs - 95.45).abs() < 1.5, "{cs}");
    }

    #[test]
    fn q_pairs_interpolate_between_grid_days() {
        let fc = CapacityForecast {
            days: vec![0.0, 30.0, 60.0],
            mean_q: vec![100.0, 99.0, 98.0],
            lower_q: vec![100.0, 98.8, 97.6],
            upper_q: vec![100.0, 99.2, 98.4],
            step_days: 30.0,
            warnings: Vec::new(),
        };
        let m = [
            CapacityMeasurement {
                day: 0.0,
                capacity: 1.0,
            },
            CapacityMeasurement {
                day: 45.0,
                capacity: 0.985,
            },
            CapacityMeasurement {
                day: 60.0,
                capacity: 0.98,
            },
            CapacityMeasurement {
                day: 61.0,
                capacity: 0.97,
            },
        ];
        let p = q_pairs(&fc, &m);
        assert_eq!(p.len(), 3);
        assert!((p[1].predicted - 98.5).abs() < 1e-12);
        assert!((p[1].sigma - 0.15).abs() < 1e-12);
        assert!((p[2].predicted - 98.0).abs() < 1e-12);
    }

    #[test]
    fn report_layout() {
        let set = MetricSet {
            mae: 0.1,
            rmse: 0.2,
            cs2sigma: 95.0,
        };
        let cells = [CellEvaluation {
            cell_id: "CELL01".into(),
            dq: Some(set),
            q: None,
        }];
        let mut buf = Vec::new();
        write_eval_report(&mut buf, &cells).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "cell_id,metric,quantity,value\nCELL01,mae,dq,0.100000\nCELL01,rmse,dq,0.200000\nCELL01,cs2sigma,dq,95.0000\n"
        );
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<EvalPair>> {
        prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.0f64..5.0), 1..40).prop_map(|v| {
            v.into_iter()
                .map(|(p, m, s)| EvalPair {
                    predicted: p,
                    measured: m,
                    sigma: s,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(p in arb_pairs()) {
            prop_assert!(mae(&p).unwrap() <= rmse(&p).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn metrics_are_permutation_invariant(p in arb_pairs(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut q = p.clone();
            q.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((mae(&p).unwrap() - mae(&q).unwrap()).abs() < 1e-12);
            prop_assert!((rmse(&p).unwrap() - rmse(&q).unwrap()).abs() < 1e-12);
            prop_assert_eq!(calibration_score_2sigma(&p).unwrap(), calibration_score_2sigma(&q).unwrap());
        }

        #[test]
        fn scaling_behaviour(p in arb_pairs(), c in 0.01f64..100.0) {
            // Exact powers of two keep the strict inequality free of rounding.
            let c = 2f64.powi(c.log2().round() as i32);
            let scaled: Vec<EvalPair> = p
                .iter()
                .map(|e| EvalPair { predicted: c * e.predicted, measured: c * e.measured, sigma: c * e.sigma })
                .collect();
            prop_assert_eq!(calibration_score_2sigma(&p).unwrap(), calibration_score_2sigma(&scaled).unwrap());
            prop_assert!((mae(&scaled).unwrap() - c * mae(&p).unwrap()).abs() <= 1e-9 * c * (1.0 + mae(&p).unwrap()));
            prop_assert!((rmse(&scaled).unwrap() - c * rmse(&p).unwrap()).abs() <= 1e-9 * c * (1.0 + rmse(&p).unwrap()));
        }
    }
}

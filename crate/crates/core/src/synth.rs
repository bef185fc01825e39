//! Synthetic capacity curves from an Arrhenius × affine-SOC rate law, and
//! draws from the GP prior.
//!
//! Capacity in percent is `100 + rise(t) - ∫ rate(T(s), SOC(s)) ds`, with
//! `rate = A · exp(-Ea_R / T) · (a0 + a1 · SOC)`. An optional knee multiplies
//! the rate after `knee_day`; Gaussian noise is added per measurement.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{
    CapacityCurve, CapacityMeasurement, StressProfile, StressSegment, KELVIN_OFFSET,
};
use crate::error::{Error, Result};
use crate::kernel::{gram_matrix, Hyperparameters, InputVector};
use crate::report::fmt6;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Percent per day.
    pub pre_exponential: f64,
    /// Activation energy over the gas constant, in kelvin.
    pub activation_temp: f64,
    /// `(a0, a1)` of the SOC factor `a0 + a1·SOC`.
    pub soc_coeffs: (f64, f64),
    /// Measurement noise std in percent.
    pub noise_std: f64,
    pub rise_amplitude: f64,
    pub rise_duration: f64,
    pub knee_day: Option<f64>,
    /// Rate multiplier after the knee.
    pub knee_factor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            pre_exponential: 5e4,
            activation_temp: 5000.0,
            soc_coeffs: (0.3, 0.007),
            noise_std: 0.05,
            rise_amplitude: 0.0,
            rise_duration: 0.0,
            knee_day: None,
            knee_factor: 5.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pre_exponential", self.pre_exponential),
            ("knee_factor", self.knee_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("activation_temp", self.activation_temp),
            ("noise_std", self.noise_std),
            ("rise_amplitude", self.rise_amplitude),
            ("rise_duration", self.rise_duration),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.rise_amplitude > 0.0 && self.rise_duration <= 0.0 {
            return Err(Error::Config(
                "rise_amplitude needs a positive rise_duration".into(),
            ));
        }
        if let Some(k) = self.knee_day {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::Config(format!(
                    "knee_day must be non-negative, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// Noiseless ageing rate in percent per day.
    pub fn rate(&self, temp_k: f64, soc: f64) -> Result<f64> {
        let (a0, a1) = self.soc_coeffs;
        let r = self.pre_exponential * (-self.activation_temp / temp_k).exp() * (a0 + a1 * soc);
        if r > 0.0 {
            Ok(r)
        } else {
            Err(Error::Config(format!(
                "rate {r} is not positive at T = {temp_k} K, SOC = {soc}%"
            )))
        }
    }

    fn rise(&self, t: f64) -> f64 {
        if self.rise_amplitude == 0.0 {
            return 0.0;
        }
        let u = (t / self.rise_duration).min(1.0);
        self.rise_amplitude * (1.0 - (1.0 - u) * (1.0 - u))
    }
}

/// One static storage test.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub cell_id: String,
    pub temp_c: f64,
    pub soc: f64,
    pub duration: f64,
    pub cadence: f64,
}

/// One cell under an arbitrary stress profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfiledCell {
    pub profile: StressProfile,
    pub cadence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthRow {
    pub temp_c: f64,
    pub soc: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SynthData {
    pub cells: Vec<CapacityCurve>,
    pub profiles: Vec<StressProfile>,
    /// Noiseless rate per distinct (T, SOC), in first-appearance order.
    pub truth: Vec<TruthRow>,
}

impl SynthData {
    pub fn extend(&mut self, other: SynthData) {
        self.cells.extend(other.cells);
        self.profiles.extend(other.profiles);
        for t in other.truth {
            if !self
                .truth
                .iter()
                .any(|u| u.temp_c == t.temp_c && u.soc == t.soc)
            {
                self.truth.push(t);
            }
        }
    }
}

/// Cumulative noiseless loss in percent at day `t`.
fn cumulative_loss(profile: &StressProfile, cfg: &SynthConfig, t: f64) -> Result<f64> {
    let mut loss = 0.0;
    for seg in profile.segments() {
        let r = cfg.rate(seg.temperature, seg.soc)?;
        let a = seg.day_start;
        let b = seg.day_end.min(t);
        if b > a {
            loss += r * (b - a);
            if let Some(k) = cfg.knee_day {
                let ka = a.max(k);
                if b > ka {
                    loss += (cfg.knee_factor - 1.0) * r * (b - ka);
                }
            }
        }
    }
    Ok(loss)
}

fn simulate(cell: &ProfiledCell, cfg: &SynthConfig, seed: u64) -> Result<CapacityCurve> {
    if !(cell.cadence > 0.0) {
        return Err(Error::Config(format!(
            "cadence must be positive, got {}",
            cell.cadence
        )));
    }
    let end = cell.profile.end_day();
    let n = ((end + 1e-9) / cell.cadence).floor() as usize;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let day = i as f64 * cell.cadence;
        let mut q = 100.0 + cfg.rise(day) - cumulative_loss(&cell.profile, cfg, day)?;
        if cfg.noise_std > 0.0 {
            q += noise.sample(&mut rng);
        }
        points.push(CapacityMeasurement {
            day,
            capacity: q / 100.0,
        });
    }
    CapacityCurve::new(cell.profile.cell_id(), points)
}

/// Curves for cells under arbitrary profiles; cell `i` draws its noise from `seed_base + i`.
pub fn generate_profiled(
    cells: &[ProfiledCell],
    cfg: &SynthConfig,
    seed_base: u64,
) -> Result<SynthData> {
    cfg.validate()?;
    let mut data = SynthData::default();
    for (i, cell) in cells.iter().enumerate() {
        let curve = simulate(cell, cfg, seed_base.wrapping_add(i as u64))?;
        let mut truth = Vec::new();
        for seg in cell.profile.segments() {
            truth.push(TruthRow {
                temp_c: seg.temp_c(),
                soc: seg.soc,
                rate: cfg.rate(seg.temperature, seg.soc)?,
            });
        }
        data.extend(SynthData {
            cells: vec![curve],
            profiles: vec![cell.profile.clone()],
            truth,
        });
    }
    Ok(data)
}

/// One cell per static condition, seeded with `cfg.seed + index`.
pub fn generate_cells(conditions: &[Condition], cfg: &SynthConfig) -> Result<SynthData> {
    let cells = conditions
        .iter()
        .map(|c| {
            Ok(ProfiledCell {
                profile: StressProfile::constant(c.cell_id.clone(), c.duration, c.temp_c, c.soc)?,
                cadence: c.cadence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    generate_profiled(&cells, cfg, cfg.seed)
}

/// The ten static (°C, SOC %) storage conditions of the reference test matrix.
pub const STATIC_CONDITIONS: [(f64, f64); 10] = [
    (25.0, 80.0),
    (25.0, 50.0),
    (35.0, 100.0),
    (35.0, 80.0),
    (35.0, 65.0),
    (35.0, 50.0),
    (35.0, 35.0),
    (35.0, 20.0),
    (45.0, 80.0),
    (45.0, 50.0),
];

/// Layout of the default synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetLayout {
    pub cells_per_condition: usize,
    pub duration: f64,
    pub cadence: f64,
    pub dynamic: bool,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        DatasetLayout {
            cells_per_condition: 3,
            duration: 1000.0,
            cadence: 28.0,
            dynamic: true,
        }
    }
}

pub fn cell_id(index: usize) -> String {
    format!("CELL{:02}", index + 1)
}

pub fn static_conditions(layout: &DatasetLayout) -> Vec<Condition> {
    STATIC_CONDITIONS
        .iter()
        .flat_map(|&(t, s)| std::iter::repeat_n((t, s), layout.cells_per_condition))
        .enumerate()
        .map(|(i, (temp_c, soc))| Condition {
            cell_id: cell_id(i),
            temp_c,
            soc,
            duration: layout.duration,
            cadence: layout.cadence,
        })
        .collect()
}

const DYNAMIC_SEGMENT_DAYS: f64 = 92.0;

/// Two cells switching condition every 92 days. Both spend their second
/// segment at 15 °C / 80 %, colder than any static test.
const DYNAMIC_SCHEDULES: [[(f64, f64); 11]; 2] = [
    [
        (35.0, 80.0),
        (15.0, 80.0),
        (25.0, 50.0),
        (45.0, 50.0),
        (35.0, 35.0),
        (25.0, 80.0),
        (45.0, 80.0),
        (35.0, 65.0),
        (25.0, 20.0),
        (35.0, 100.0),
        (45.0, 65.0),
    ],
    [
        (25.0, 65.0),
        (15.0, 80.0),
        (45.0, 80.0),
        (35.0, 50.0),
        (25.0, 35.0),
        (45.0, 20.0),
        (35.0, 80.0),
        (25.0, 100.0),
        (45.0, 50.0),
        (35.0, 65.0),
        (25.0, 80.0),
    ],
];

pub fn dynamic_cells(layout: &DatasetLayout, first_index: usize) -> Result<Vec<ProfiledCell>> {
    DYNAMIC_SCHEDULES
        .iter()
        .enumerate()
        .map(|(i, schedule)| {
            let mut segments = Vec::new();
            for (k, &(t, s)) in schedule.iter().enumerate() {
                let start = k as f64 * DYNAMIC_SEGMENT_DAYS;
                if start >= layout.duration {
                    break;
                }
                let end = (start + DYNAMIC_SEGMENT_DAYS).min(layout.duration);
                segments.push(StressSegment::from_celsius(start, end, t, s)?);
            }
            Ok(ProfiledCell {
                profile: StressProfile::new(cell_id(first_index + i), segments)?,
                cadence: layout.cadence,
            })
        })
        .collect()
}

/// Static cells for every reference condition, followed by the dynamic cells.
pub fn default_dataset(cfg: &SynthConfig, layout: &DatasetLayout) -> Result<SynthData> {
    let conditions = static_conditions(layout);
    let mut data = generate_cells(&conditions, cfg)?;
    if layout.dynamic {
        let dynamic = dynamic_cells(layout, conditions.len())?;
        let seed = cfg.seed.wrapping_add(conditions.len() as u64);
        data.extend(generate_profiled(&dynamic, cfg, seed)?);
    }
    Ok(data)
}

pub fn write_truth<W: Write>(mut out: W, truth: &[TruthRow]) -> std::io::Result<()> {
    writeln!(out, "temp_c,soc_pct,rate_pct_per_day")?;
    for t in truth {
        writeln!(out, "{},{},{}", fmt6(t.temp_c), fmt6(t.soc), fmt6(t.rate))?;
    }
    Ok(())
}

/// Draws `y ~ N(0, K + σ_n² I)` at `x`.
pub fn sample_from_prior(x: &[InputVector], h: &Hyperparameters, seed: u64) -> Result<Vec<f64>> {
    let k = gram_matrix(x, h, true)?;
    let chol = k.cholesky().ok_or(Error::Numerical {
        attempted: vec![0.0],
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|_| StandardNormal.sample(&mut rng)),
    );
    Ok((chol.l() * z).iter().copied().collect())
}

/// Parses a flat key=value synth configuration. Unknown keys are rejected.
pub fn parse_synth_config(map: &BTreeMap<String, String>) -> Result<(SynthConfig, DatasetLayout)> {
    let mut cfg = SynthConfig::default();
    let mut layout = DatasetLayout::default();
    for (key, value) in map {
        let num = || -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: '{value}' is not a number")))
        };
        let int = || -> Result<u64> {
            value.parse::<u64>().map_err(|_| {
                Error::Config(format!("{key}: '{value}' is not a non-negative integer"))
            })
        };
        match key.as_str() {
            "pre_exponential" => cfg.pre_exponential = num()?,
            "activation_temp" => cfg.activation_temp = num()?,
            "soc_a0" => cfg.soc_coeffs.0 = num()?,
            "soc_a1" => cfg.soc_coeffs.1 = num()?,
            "noise_std" => cfg.noise_std = num()?,
            "rise_amplitude" => cfg.rise_amplitude = num()?,
            "rise_duration" => cfg.rise_duration = num()?,
            "knee_day" => cfg.knee_day = if value == "none" { None } else { Some(num()?) },
            "knee_factor" => cfg.knee_factor = num()?,
            "seed" => cfg.seed = int()?,
            "cells_per_condition" => layout.cells_per_condition = int()? as usize,
            "duration_days" => layout.duration = num()?,
            "cadence_days" => layout.cadence = num()?,
            "dynamic" => {
                layout.dynamic = value
                    .parse()
                    .map_err(|_| Error::Config(format!("dynamic: '{value}' is not true/false")))?
            }
            other => return Err(Error::Config(format!("unknown synth key '{other}'"))),
        }
    }
    cfg.validate()?;
    if layout.cells_per_condition == 0 || !(layout.duration > 0.0) || !(layout.cadence > 0.0) {
        return Err(Error::Config(
            "dataset layout values must be positive".into(),
        ));
    }
    Ok((cfg, layout))
}

/// Temperature in kelvin from °C, for callers building conditions by hand.
pub fn kelvin(temp_c: f64) -> f64 {
    temp_c + KELVIN_OFFSET
}

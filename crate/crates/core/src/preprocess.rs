//! Capacity-curve preprocessing: BOL re-anchoring, phase segmentation,
//! outlier removal and windowed training-row extraction.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CapacityCurve, CapacityMeasurement, StressProfile};
use crate::error::{Error, Result};

/// Storage windows used to build training rows, in days.
pub const DEFAULT_WINDOWS: [f64; 3] = [30.0, 60.0, 90.0];

const MAD_TO_SIGMA: f64 = 1.4826;
/// Floor on the robust residual scale (capacity fraction).
const MIN_ROBUST_SCALE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseLabel {
    Rise,
    LinearDecline,
    Knee,
    Slowdown,
}

impl PhaseLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseLabel::Rise => "rise",
            PhaseLabel::LinearDecline => "linear_decline",
            PhaseLabel::Knee => "knee",
            PhaseLabel::Slowdown => "slowdown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationConfig {
    pub knee_run: usize,
    pub slow_run: usize,
    pub knee_factor: f64,
    pub slow_factor: f64,
    /// Slope thresholds are widened by this many robust standard deviations
    /// of the reference region's capacity increments, per interval length.
    /// Zero gives the bare factor rule.
    pub noise_z: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            knee_run: 2,
            slow_run: 2,
            knee_factor: 2.0,
            slow_factor: 0.5,
            noise_z: 3.0,
        }
    }
}

/// One supervised example: capacity change over a window at constant stress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub cell_id: String,
    pub t_start: f64,
    /// Window length, days.
    pub dt: f64,
    /// Reciprocal temperature, 1/K.
    pub inv_temp: f64,
    /// SOC, percent.
    pub soc: f64,
    /// Capacity change over the window, percent of reference.
    pub dq: f64,
}

/// Sub-curve starting at the capacity maximum, shifted to day 0 and
/// renormalised so the maximum is exactly 1.
pub fn rebase_bol(curve: &CapacityCurve) -> Result<CapacityCurve> {
    let (offset, peak) = rebase_anchor(curve)?;
    let points = curve
        .points()
        .iter()
        .filter(|p| p.day >= offset)
        .map(|p| CapacityMeasurement {
            day: p.day - offset,
            capacity: p.capacity / peak,
        })
        .collect();
    CapacityCurve::new(curve.cell_id(), points)
}

/// Day and capacity of the first global maximum.
pub fn rebase_anchor(curve: &CapacityCurve) -> Result<(f64, f64)> {
    let pts = curve.points();
    let mut best = 0;
    for (i, p) in pts.iter().enumerate() {
        if p.capacity > pts[best].capacity {
            best = i;
        }
    }
    if best + 1 == pts.len() {
        return Err(Error::EmptyAfterRebase(curve.cell_id().to_owned()));
    }
    Ok((pts[best].day, pts[best].capacity))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Least-squares line through `(x, y)`; returns `(intercept, slope)`.
fn line_fit(pts: impl Iterator<Item = (f64, f64)> + Clone) -> (f64, f64) {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts
        .clone()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxx, sxy) = pts.fold((0.0, 0.0), |(a, b), (x, y)| {
        (a + (x - mx) * (x - mx), b + (x - mx) * (y - my))
    });
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Labels every point with its ageing phase.
///
/// Interval slopes are compared against the median slope of the first half
/// of the declining region. A run of `knee_run` intervals steeper than
/// `knee_factor` times the reference starts the knee at the point reached by
/// the first steep interval; after that, a run of `slow_run` intervals
/// shallower than `slow_factor` times the reference starts the slowdown.
pub fn segment_phases(curve: &CapacityCurve, cfg: &SegmentationConfig) -> Result<Vec<PhaseLabel>> {
    let pts = curve.points();
    let n = pts.len();
    let peak = pts.iter().enumerate().fold(0, |best, (i, p)| {
        if p.capacity > pts[best].capacity {
            i
        } else {
            best
        }
    });
    if n - peak < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: n - peak,
        });
    }

    let mut labels = vec![PhaseLabel::Rise; peak];
    labels.resize(n, PhaseLabel::LinearDecline);

    let slopes: Vec<f64> = pts
        .windows(2)
        .map(|w| (w[1].capacity - w[0].capacity) / (w[1].day - w[0].day))
        .collect();
    let declining = &slopes[peak..];
    let half = (declining.len() / 2).max(1);
    let reference = median(&mut declining[..half].to_vec());
    if reference >= 0.0 {
        return Ok(labels);
    }

    // Spread of interval increments around the reference slope.
    let mut incr: Vec<f64> = (peak..peak + half)
        .map(|i| {
            (pts[i + 1].capacity - pts[i].capacity) - reference * (pts[i + 1].day - pts[i].day)
        })
        .collect();
    let centre = median(&mut incr.clone());
    let mut dev: Vec<f64> = incr.iter_mut().map(|e| (*e - centre).abs()).collect();
    let incr_scale = MAD_TO_SIGMA * median(&mut dev);
    let margin = |i: usize| cfg.noise_z * incr_scale / (pts[i + 1].day - pts[i].day);

    let steep = |i: usize| slopes[i] < cfg.knee_factor * reference - margin(i);
    let shallow = |i: usize| slopes[i] > cfg.slow_factor * reference + margin(i);
    let run_start = |from: usize, run: usize, pred: &dyn Fn(usize) -> bool| {
        let run = run.max(1);
        (from..slopes.len()).find(|&i| i + run <= slopes.len() && (i..i + run).all(pred))
    };

    if let Some(k) = run_start(peak, cfg.knee_run, &steep) {
        for label in &mut labels[k + 1..] {
            *label = PhaseLabel::Knee;
        }
        if let Some(s) = run_start(k + cfg.knee_run.max(1), cfg.slow_run, &shallow) {
            for label in &mut labels[s + 1..] {
                *label = PhaseLabel::Slowdown;
            }
        }
    }
    Ok(labels)
}

/// Residual of point `i` from a line through the other points of its
/// five-point window.
fn local_residual(pts: &[CapacityMeasurement], i: usize) -> f64 {
    let n = pts.len();
    let lo = i.saturating_sub(2).min(n - 5);
    let window = (lo..lo + 5)
        .filter(|&j| j != i)
        .map(|j| (pts[j].day, pts[j].capacity));
    let (b, m) = line_fit(window);
    pts[i].capacity - (b + m * pts[i].day)
}

/// Drops measurement outliers and capacity-recovery jumps.
///
/// The worst point whose local residual exceeds `z_thresh` robust scales is
/// removed and residuals are recomputed until none remain. Points rising
/// above their predecessor by more than one robust scale are then dropped.
/// Curves shorter than five points are returned unchanged; the result may
/// be empty.
pub fn remove_outliers(curve: &CapacityCurve, z_thresh: f64) -> Vec<CapacityMeasurement> {
    let mut pts = curve.points().to_vec();
    if pts.len() < 5 {
        return pts;
    }
    let mut scale = MIN_ROBUST_SCALE;
    while pts.len() >= 5 {
        let resid: Vec<f64> = (0..pts.len()).map(|i| local_residual(&pts, i)).collect();
        let centre = median(&mut resid.clone());
        let mut dev: Vec<f64> = resid.iter().map(|r| (r - centre).abs()).collect();
        scale = (MAD_TO_SIGMA * median(&mut dev)).max(MIN_ROBUST_SCALE);
        let worst = resid
            .iter()
            .enumerate()
            .map(|(i, r)| (i, (r - centre).abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, d)) if d > z_thresh * scale => {
                pts.remove(i);
            }
            _ => break,
        }
    }

    let mut kept: Vec<CapacityMeasurement> = Vec::with_capacity(pts.len());
    for p in pts {
        match kept.last() {
            Some(prev) if p.capacity - prev.capacity > scale => {}
            _ => kept.push(p),
        }
    }
    kept
}

/// The contiguous LinearDecline block of a labelled curve.
pub fn linear_portion(curve: &CapacityCurve, labels: &[PhaseLabel]) -> Vec<CapacityMeasurement> {
    curve
        .points()
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == PhaseLabel::LinearDecline)
        .map(|(p, _)| *p)
        .collect()
}

/// Windowed capacity-loss rows from the LinearDecline points of a curve.
///
/// For every LinearDecline day `t` and window `dt` with `t + dt` inside the
/// block, a row is emitted when a single profile segment covers `[t, t + dt]`.
/// `dq` is in percent of the reference capacity.
pub fn build_training_rows(
    curve: &CapacityCurve,
    labels: &[PhaseLabel],
    profile: &StressProfile,
    windows: &[f64],
) -> Result<Vec<TrainingRow>> {
    if labels.len() != curve.len() {
        return Err(Error::Data(format!(
            "cell {}: {} labels for {} points",
            curve.cell_id(),
            labels.len(),
            curve.len()
        )));
    }
    if !profile.covers(curve.first_day(), curve.last_day()) {
        return Err(Error::Coverage(format!(
            "profile {} ends at day {} but cell {} is measured until day {}",
            profile.cell_id(),
            profile.end_day(),
            curve.cell_id(),
            curve.last_day()
        )));
    }
    let points = linear_portion(curve, labels);
    if points.len() < 2 {
        return Ok(Vec::new());
    }
    let linear = CapacityCurve::new(curve.cell_id(), points)?;
    let last = linear.last_day();

    let mut rows = Vec::new();
    for p in linear.points() {
        for &dt in windows {
            let end = p.day + dt;
            if end > last {
                continue;
            }
            let Some(seg) = profile.segment_covering(p.day, end) else {
                continue;
            };
            let dq = 100.0 * (linear.capacity_at(end)? - p.capacity);
            rows.push(TrainingRow {
                cell_id: curve.cell_id().to_owned(),
                t_start: p.day,
                dt,
                inv_temp: seg.inv_temp(),
                soc: seg.soc,
                dq,
            });
        }
    }
    Ok(rows)
}

/// A cell after the full preprocessing chain.
#[derive(Clone, Debug)]
pub struct PreparedCell {
    /// Rebased, outlier-free curve (all phases).
    pub curve: CapacityCurve,
    pub labels: Vec<PhaseLabel>,
    /// Original day corresponding to rebased day 0.
    pub offset_day: f64,
    /// Profile shifted so that day 0 is the rebased BOL.
    pub profile: StressProfile,
    pub rows: Vec<TrainingRow>,
}

impl PreparedCell {
    pub fn cell_id(&self) -> &str {
        self.curve.cell_id()
    }

    /// LinearDecline measurements in rebased days.
    pub fn linear_points(&self) -> Vec<CapacityMeasurement> {
        linear_portion(&self.curve, &self.labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub segmentation: SegmentationConfig,
    pub z_thresh: f64,
    pub windows: Vec<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            segmentation: SegmentationConfig::default(),
            z_thresh: 4.0,
            windows: DEFAULT_WINDOWS.to_vec(),
        }
    }
}

/// Rebase, clean, re-anchor, segment and extract rows for one cell.
pub fn prepare_cell(
    raw: &CapacityCurve,
    profile: &StressProfile,
    cfg: &PreprocessConfig,
) -> Result<PreparedCell> {
    let (first_offset, _) = rebase_anchor(raw)?;
    let rebased = rebase_bol(raw)?;
    let cleaned = remove_outliers(&rebased, cfg.z_thresh);
    let cleaned = CapacityCurve::new(raw.cell_id(), cleaned)?;
    // Cleaning may drop the maximum itself; re-anchor on what remains.
    let (second_offset, _) = rebase_anchor(&cleaned)?;
    let curve = rebase_bol(&cleaned)?;
    let offset_day = first_offset + second_offset;
    let labels = segment_phases(&curve, &cfg.segmentation)?;
    let profile = profile.shifted(offset_day)?;
    let rows = build_training_rows(&curve, &labels, &profile, &cfg.windows)?;
    Ok(PreparedCell {
        curve,
        labels,
        offset_day,
        profile,
        rows,
    })
}

pub fn write_rows<W: Write>(mut out: W, rows: &[TrainingRow]) -> std::io::Result<()> {
    writeln!(
        out,
        "cell_id,t_start_day,dt_days,inv_temp_per_k,soc_pct,dq_pct"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.cell_id, r.t_start, r.dt, r.inv_temp, r.soc, r.dq
        )?;
    }
    out.flush()
}

pub fn save_rows(path: impl AsRef<Path>, rows: &[TrainingRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(BufWriter::new(file), rows).map_err(|e| Error::io(path, e))
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<TrainingRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    if header
        != [
            "cell_id",
            "t_start_day",
            "dt_days",
            "inv_temp_per_k",
            "soc_pct",
            "dq_pct",
        ]
    {
        return Err(Error::Parse {
            line: 1,
            message: format!("unrecognised rows header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("expected a number, found {:?}", &record[i]),
                })
        };
        rows.push(TrainingRow {
            cell_id: record[0].to_owned(),
            t_start: num(1)?,
            dt: num(2)?,
            inv_temp: num(3)?,
            soc: num(4)?,
            dq: num(5)?,
        });
    }
    Ok(rows)
}

pub fn load_rows(path: impl AsRef<Path>) -> Result<Vec<TrainingRow>> {
    let path = path.as_ref();
    read_rows(File::open(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StressSegment;
    use proptest::prelude::*;

    fn curve(days: &[f64], caps: &[f64]) -> CapacityCurve {
        let pts = days
            .iter()
            .zip(caps)
            .map(|(&day, &capacity)| CapacityMeasurement { day, capacity })
            .collect();
        CapacityCurve::new("C", pts).unwrap()
    }

    fn linear_curve(n: usize, step: f64, slope: f64) -> CapacityCurve {
        let days: Vec<f64> = (0..n).map(|i| i as f64 * step).collect();
        let caps: Vec<f64> = days.iter().map(|d| 1.0 + slope * d).collect();
        curve(&days, &caps)
    }

    /// Piecewise-linear curve with slope changes at the given days (percent/day).
    fn piecewise(days: &[f64], breaks: &[(f64, f64)]) -> CapacityCurve {
        let caps: Vec<f64> = days
            .iter()
            .map(|&d| {
                let mut q = 100.0;
                for (i, &(start, slope)) in breaks.iter().enumerate() {
                    let end = breaks.get(i + 1).map_or(f64::INFINITY, |b| b.0);
                    if d > start {
                        q += slope * (d.min(end) - start);
                    }
                }
                q / 100.0
            })
            .collect();
        curve(days, &caps)
    }

    /// Labels points by the generating segment their day falls in.
    fn oracle_labels(days: &[f64], knee: f64, slow: Option<f64>) -> Vec<PhaseLabel> {
        days.iter()
            .map(|&d| match slow {
                Some(s) if d > s => PhaseLabel::Slowdown,
                _ if d > knee => PhaseLabel::Knee,
                _ => PhaseLabel::LinearDecline,
            })
            .collect()
    }

    #[test]
    fn rebase_shifts_and_renormalises() {
        let c = curve(&[0.0, 28.0, 56.0, 84.0], &[1.00, 1.01, 1.005, 0.99]);
        let r = rebase_bol(&c).unwrap();
        let days: Vec<f64> = r.points().iter().map(|p| p.day).collect();
        assert_eq!(days, vec![0.0, 28.0, 56.0]);
        assert_eq!(r.points()[0].capacity, 1.0);
        assert_eq!(r.points()[1].capacity, 1.005 / 1.01);
        assert_eq!(r.points()[2].capacity, 0.99 / 1.01);
    }

    #[test]
    fn rebase_declining_and_rising() {
        let c = curve(&[0.0, 10.0, 20.0], &[0.98, 0.97, 0.96]);
        let r = rebase_bol(&c).unwrap();
        assert_eq!(r.points()[0].capacity, 1.0);
        assert_eq!(r.points()[2].capacity, 0.96 / 0.98);
        let rising = curve(&[0.0, 10.0, 20.0], &[0.96, 0.97, 0.98]);
        assert!(matches!(
            rebase_bol(&rising),
            Err(Error::EmptyAfterRebase(_))
        ));
    }

    #[test]
    fn linear_curve_is_all_linear_decline() {
        let c = linear_curve(10, 30.0, -1e-4);
        let labels = segment_phases(&c, &SegmentationConfig::default()).unwrap();
        assert!(labels.iter().all(|l| *l == PhaseLabel::LinearDecline));
    }

    #[test]
    fn knee_detected_at_first_steep_point() {
        let days: Vec<f64> = (0..=20).map(|i| i as f64 * 30.0).collect();
        let c = piecewise(&days, &[(0.0, -0.01), (300.0, -0.05)]);
        let labels = segment_phases(&c, &SegmentationConfig::default()).unwrap();
        assert_eq!(labels, oracle_labels(&days, 300.0, None));
        // Knee onset between measurement days.
        let days28: Vec<f64> = (0..=24).map(|i| i as f64 * 28.0).collect();
        let c = piecewise(&days28, &[(0.0, -0.01), (300.0, -0.05)]);
        let labels = segment_phases(&c, &SegmentationConfig::default()).unwrap();
        assert_eq!(labels, oracle_labels(&days28, 300.0, None));
    }

    #[test]
    fn slowdown_after_knee() {
        let days: Vec<f64> = (0..=30).map(|i| i as f64 * 30.0).collect();
        let c = piecewise(&days, &[(0.0, -0.01), (300.0, -0.05), (600.0, -0.003)]);
        let labels = segment_phases(&c, &SegmentationConfig::default()).unwrap();
        assert_eq!(labels, oracle_labels(&days, 300.0, Some(600.0)));
    }

    #[test]
    fn segmentation_needs_four_points() {
        let c = linear_curve(3, 30.0, -1e-4);
        assert!(matches!(
            segment_phases(&c, &SegmentationConfig::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn single_displaced_point_removed() {
        let c = linear_curve(15, 28.0, -1e-4);
        let mut pts = c.points().to_vec();
        pts[6].capacity += 0.02;
        let noisy = CapacityCurve::new("C", pts).unwrap();
        let cleaned = remove_outliers(&noisy, 4.0);
        assert_eq!(cleaned.len(), 14);
        assert!(cleaned.iter().all(|p| p.day != 6.0 * 28.0));
        assert_eq!(remove_outliers(&c, 4.0), c.points().to_vec());
    }

    #[test]
    fn short_curves_untouched() {
        let c = curve(&[0.0, 28.0, 56.0], &[1.0, 1.2, 0.5]);
        assert_eq!(remove_outliers(&c, 4.0), c.points().to_vec());
    }

    fn static_profile(days: f64) -> StressProfile {
        StressProfile::constant("C", days, 35.0, 80.0).unwrap()
    }

    #[test]
    fn rows_follow_window_pattern() {
        let c = curve(&[0.0, 30.0, 60.0, 90.0], &[1.0, 0.999, 0.9986, 0.9982]);
        let labels = vec![PhaseLabel::LinearDecline; 4];
        let rows =
            build_training_rows(&c, &labels, &static_profile(90.0), &DEFAULT_WINDOWS).unwrap();
        let got: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r.t_start, r.dt, r.dq)).collect();
        let expected = [
            (0.0, 30.0, -0.10),
            (0.0, 60.0, -0.14),
            (0.0, 90.0, -0.18),
            (30.0, 30.0, -0.04),
            (30.0, 60.0, -0.08),
            (60.0, 30.0, -0.04),
        ];
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(expected) {
            assert_eq!((g.0, g.1), (e.0, e.1));
            assert!((g.2 - e.2).abs() < 1e-12, "{g:?} vs {e:?}");
        }
        for r in &rows {
            assert_eq!(r.inv_temp, 1.0 / (35.0 + 273.15));
            assert_eq!(r.soc, 80.0);
        }
    }

    #[test]
    fn single_linear_point_gives_no_rows() {
        let c = curve(&[0.0, 30.0, 60.0], &[1.0, 0.99, 0.9]);
        let labels = vec![
            PhaseLabel::LinearDecline,
            PhaseLabel::Knee,
            PhaseLabel::Knee,
        ];
        let rows = build_training_rows(&c, &labels, &static_profile(60.0), &[30.0]).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn windows_crossing_segments_skipped() {
        let profile = StressProfile::new(
            "C",
            vec![
                StressSegment::from_celsius(0.0, 45.0, 25.0, 80.0).unwrap(),
                StressSegment::from_celsius(45.0, 200.0, 35.0, 50.0).unwrap(),
            ],
        )
        .unwrap();
        let c = curve(&[0.0, 30.0, 60.0], &[1.0, 0.99, 0.98]);
        let labels = vec![PhaseLabel::LinearDecline; 3];
        let rows = build_training_rows(&c, &labels, &profile, &[30.0]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].t_start, 0.0);
        assert_eq!(rows[0].soc, 80.0);
    }

    #[test]
    fn uncovered_curve_is_an_error() {
        let c = curve(&[0.0, 30.0, 60.0], &[1.0, 0.99, 0.98]);
        let labels = vec![PhaseLabel::LinearDecline; 3];
        assert!(matches!(
            build_training_rows(&c, &labels, &static_profile(50.0), &[30.0]),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn rows_csv_round_trip() {
        let rows = vec![TrainingRow {
            cell_id: "X".into(),
            t_start: 28.0,
            dt: 30.0,
            inv_temp: 1.0 / 308.15,
            soc: 65.0,
            dq: -0.0412345678901,
        }];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn phase_labels_are_ordered(caps in prop::collection::vec(0.8f64..1.0, 4..40)) {
            let days: Vec<f64> = (0..caps.len()).map(|i| i as f64 * 28.0).collect();
            let c = curve(&days, &caps);
            if let Ok(labels) = segment_phases(&c, &SegmentationConfig { noise_z: 0.0, ..Default::default() }) {
                prop_assert!(labels.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn rebase_starts_at_one(caps in prop::collection::vec(0.8f64..1.0, 2..30)) {
            let days: Vec<f64> = (0..caps.len()).map(|i| i as f64 * 28.0).collect();
            let c = curve(&days, &caps);
            if let Ok(r) = rebase_bol(&c) {
                prop_assert_eq!(r.points()[0].capacity, 1.0);
                prop_assert_eq!(r.points()[0].day, 0.0);
                prop_assert!(r.points().iter().all(|p| p.capacity <= 1.0));
            }
        }

        #[test]
        fn row_targets_match_recomputation(
            caps in prop::collection::vec(0.9f64..1.0, 2..20),
            gaps in prop::collection::vec(10.0f64..40.0, 20),
        ) {
            let mut day = 0.0;
            let days: Vec<f64> = gaps.iter().take(caps.len()).map(|g| { let d = day; day += g; d }).collect();
            let c = curve(&days, &caps);
            let labels = vec![PhaseLabel::LinearDecline; c.len()];
            let profile = static_profile(c.last_day());
            let rows = build_training_rows(&c, &labels, &profile, &DEFAULT_WINDOWS).unwrap();
            for r in &rows {
                let oracle = 100.0 * (c.capacity_at(r.t_start + r.dt).unwrap() - c.capacity_at(r.t_start).unwrap());
                prop_assert!((r.dq - oracle).abs() <= 1e-12);
            }
        }

        #[test]
        fn linear_curve_targets_are_slope_times_window(slope in -1e-3f64..-1e-6, n in 5usize..30) {
            let c = linear_curve(n, 28.0, slope);
            let labels = vec![PhaseLabel::LinearDecline; n];
            let rows = build_training_rows(&c, &labels, &static_profile(c.last_day()), &DEFAULT_WINDOWS).unwrap();
            prop_assert!(!rows.is_empty());
            for r in &rows {
                prop_assert!((r.dq - 100.0 * slope * r.dt).abs() < 1e-10);
            }
        }
    }
}

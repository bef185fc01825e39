//! Capacity-test and stress-profile ingestion.
//!
//! Cells CSV (`cell_id,day,capacity`, or `cell_id,day,capacity_ah,reference_ah`
//! for absolute capacities) and profile CSV
//! (`cell_id,day_start,day_end,temp_c,soc_pct`). Temperatures are held in
//! Kelvin once loaded.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KELVIN_OFFSET: f64 = 273.15;
/// Manufacturer storage window, -30 °C to +55 °C.
pub const MIN_TEMPERATURE_K: f64 = 243.15;
pub const MAX_TEMPERATURE_K: f64 = 328.15;

const CONTIGUITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityMeasurement {
    /// Days since test start.
    pub day: f64,
    /// Fraction of the reference capacity.
    pub capacity: f64,
}

/// Per-cell capacity time series, strictly increasing in day.
#[derive(Clone, Debug, PartialEq)]
pub struct CapacityCurve {
    cell_id: String,
    points: Vec<CapacityMeasurement>,
}

impl CapacityCurve {
    pub fn new(cell_id: impl Into<String>, points: Vec<CapacityMeasurement>) -> Result<Self> {
        let cell_id = cell_id.into();
        if points.len() < 2 {
            return Err(Error::Data(format!(
                "cell {cell_id}: a capacity curve needs at least 2 points, got {}",
                points.len()
            )));
        }
        for p in &points {
            if !(p.day.is_finite() && p.day >= 0.0) {
                return Err(Error::Data(format!(
                    "cell {cell_id}: invalid day {}",
                    p.day
                )));
            }
            if !(p.capacity.is_finite() && p.capacity > 0.0) {
                return Err(Error::Data(format!(
                    "cell {cell_id}: invalid capacity {} at day {}",
                    p.capacity, p.day
                )));
            }
        }
        if let Some(w) = points.windows(2).find(|w| w[1].day <= w[0].day) {
            return Err(Error::Data(format!(
                "cell {cell_id}: days not strictly increasing ({} then {})",
                w[0].day, w[1].day
            )));
        }
        Ok(CapacityCurve { cell_id, points })
    }

    pub fn cell_id(&self) -> &str {
        &self.cell_id
    }

    pub fn points(&self) -> &[CapacityMeasurement] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_day(&self) -> f64 {
        self.points[0].day
    }

    pub fn last_day(&self) -> f64 {
        self.points[self.points.len() - 1].day
    }

    /// Linearly interpolated capacity; no extrapolation outside the measured span.
    pub fn capacity_at(&self, day: f64) -> Result<f64> {
        let (lo, hi) = (self.first_day(), self.last_day());
        if !(day >= lo && day <= hi) {
            return Err(Error::Range { value: day, lo, hi });
        }
        let idx = self.points.partition_point(|p| p.day < day);
        let right = self.points[idx];
        if right.day == day {
            return Ok(right.capacity);
        }
        let left = self.points[idx - 1];
        let w = (day - left.day) / (right.day - left.day);
        Ok(left.capacity + w * (right.capacity - left.capacity))
    }

    /// Points with `day <= until`, or `None` when fewer than two remain.
    pub fn truncated(&self, until: f64) -> Option<CapacityCurve> {
        let points: Vec<_> = self
            .points
            .iter()
            .copied()
            .filter(|p| p.day <= until)
            .collect();
        CapacityCurve::new(self.cell_id.clone(), points).ok()
    }
}

/// Free-function form of [`CapacityCurve::capacity_at`].
pub fn capacity_at(curve: &CapacityCurve, day: f64) -> Result<f64> {
    curve.capacity_at(day)
}

/// Constant storage conditions over `[day_start, day_end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressSegment {
    pub day_start: f64,
    pub day_end: f64,
    /// Kelvin.
    pub temperature: f64,
    /// Percent, 0-100.
    pub soc: f64,
}

impl StressSegment {
    pub fn new(day_start: f64, day_end: f64, temperature: f64, soc: f64) -> Result<Self> {
        if !(day_start.is_finite()
            && day_end.is_finite()
            && day_start >= 0.0
            && day_end > day_start)
        {
            return Err(Error::Data(format!(
                "segment [{day_start}, {day_end}] must satisfy 0 <= start < end"
            )));
        }
        if !(MIN_TEMPERATURE_K..=MAX_TEMPERATURE_K).contains(&temperature) {
            return Err(Error::Data(format!(
                "temperature {temperature} K outside [{MIN_TEMPERATURE_K}, {MAX_TEMPERATURE_K}]"
            )));
        }
        if !(0.0..=100.0).contains(&soc) {
            return Err(Error::Data(format!("SOC {soc} outside [0, 100]")));
        }
        Ok(StressSegment {
            day_start,
            day_end,
            temperature,
            soc,
        })
    }

    pub fn from_celsius(day_start: f64, day_end: f64, temp_c: f64, soc: f64) -> Result<Self> {
        Self::new(day_start, day_end, temp_c + KELVIN_OFFSET, soc)
    }

    pub fn temp_c(&self) -> f64 {
        self.temperature - KELVIN_OFFSET
    }

    pub fn inv_temp(&self) -> f64 {
        1.0 / self.temperature
    }

    pub fn duration(&self) -> f64 {
        self.day_end - self.day_start
    }
}

/// Piecewise-constant storage schedule starting at day 0.
#[derive(Clone, Debug, PartialEq)]
pub struct StressProfile {
    cell_id: String,
    segments: Vec<StressSegment>,
}

impl StressProfile {
    pub fn new(cell_id: impl Into<String>, segments: Vec<StressSegment>) -> Result<Self> {
        let cell_id = cell_id.into();
        let Some(first) = segments.first() else {
            return Err(Error::Data(format!("profile {cell_id} has no segments")));
        };
        if first.day_start.abs() > CONTIGUITY_TOL {
            return Err(Error::Data(format!(
                "profile {cell_id} starts at day {} instead of 0",
                first.day_start
            )));
        }
        for w in segments.windows(2) {
            if (w[1].day_start - w[0].day_end).abs() > CONTIGUITY_TOL {
                return Err(Error::Data(format!(
                    "profile {cell_id} is not contiguous: segment ends at {} but next starts at {}",
                    w[0].day_end, w[1].day_start
                )));
            }
        }
        Ok(StressProfile { cell_id, segments })
    }

    /// Single-segment profile.
    pub fn constant(cell_id: impl Into<String>, days: f64, temp_c: f64, soc: f64) -> Result<Self> {
        Self::new(
            cell_id,
            vec![StressSegment::from_celsius(0.0, days, temp_c, soc)?],
        )
    }

    pub fn cell_id(&self) -> &str {
        &self.cell_id
    }

    pub fn segments(&self) -> &[StressSegment] {
        &self.segments
    }

    pub fn end_day(&self) -> f64 {
        self.segments[self.segments.len() - 1].day_end
    }

    pub fn is_static(&self) -> bool {
        self.segments.len() == 1
    }

    /// The segment containing the whole interval `[from, to]`, if any.
    pub fn segment_covering(&self, from: f64, to: f64) -> Option<&StressSegment> {
        self.segments
            .iter()
            .find(|s| s.day_start <= from && to <= s.day_end)
    }

    pub fn covers(&self, from: f64, to: f64) -> bool {
        from >= self.segments[0].day_start && to <= self.end_day()
    }

    /// Splits `[from, to]` at segment boundaries into `(start, end, segment)` pieces.
    pub fn pieces(&self, from: f64, to: f64) -> Result<Vec<(f64, f64, StressSegment)>> {
        if !self.covers(from, to) {
            return Err(Error::Coverage(format!(
                "profile {} covers [0, {}] but [{from}, {to}] was requested",
                self.cell_id,
                self.end_day()
            )));
        }
        Ok(self
            .segments
            .iter()
            .filter_map(|s| {
                let a = s.day_start.max(from);
                let b = s.day_end.min(to);
                (b > a).then_some((a, b, *s))
            })
            .collect())
    }

    /// Re-bases the profile so that `offset` becomes day 0, dropping anything before it.
    pub fn shifted(&self, offset: f64) -> Result<StressProfile> {
        if offset == 0.0 {
            return Ok(self.clone());
        }
        let segments = self
            .segments
            .iter()
            .filter(|s| s.day_end > offset)
            .map(|s| StressSegment {
                day_start: (s.day_start - offset).max(0.0),
                day_end: s.day_end - offset,
                ..*s
            })
            .collect();
        StressProfile::new(self.cell_id.clone(), segments)
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

fn header_fields<R: Read>(rdr: &mut csv::Reader<R>) -> Result<Vec<String>> {
    Ok(rdr
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(str::to_owned)
        .collect())
}

fn number(record: &csv::StringRecord, idx: usize, what: &str, line: u64) -> Result<f64> {
    let raw = &record[idx];
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("{what}: expected a number, found {raw:?}"),
        })
}

fn expect_columns(record: &csv::StringRecord, n: usize, line: u64) -> Result<()> {
    if record.len() != n {
        return Err(Error::Parse {
            line,
            message: format!("expected {n} columns, found {}", record.len()),
        });
    }
    Ok(())
}

/// Groups rows by id in first-appearance order.
struct Grouper<T> {
    order: Vec<String>,
    groups: HashMap<String, Vec<T>>,
}

impl<T> Grouper<T> {
    fn new() -> Self {
        Grouper {
            order: Vec::new(),
            groups: HashMap::new(),
        }
    }

    fn push(&mut self, id: &str, item: T) {
        if !self.groups.contains_key(id) {
            self.order.push(id.to_owned());
        }
        self.groups.entry(id.to_owned()).or_default().push(item);
    }

    fn into_groups(mut self) -> Vec<(String, Vec<T>)> {
        self.order
            .into_iter()
            .map(|id| {
                let items = self.groups.remove(&id).unwrap_or_default();
                (id, items)
            })
            .collect()
    }
}

pub fn read_cells<R: Read>(input: R) -> Result<Vec<CapacityCurve>> {
    let mut rdr = reader(input);
    let header = header_fields(&mut rdr)?;
    let absolute = match header
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .as_slice()
    {
        ["cell_id", "day", "capacity"] => false,
        ["cell_id", "day", "capacity_ah", "reference_ah"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unrecognised cells header {header:?}"),
            })
        }
    };
    let columns = if absolute { 4 } else { 3 };

    let mut grouper = Grouper::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        expect_columns(&record, columns, line)?;
        let day = number(&record, 1, "day", line)?;
        let capacity = if absolute {
            let ah = number(&record, 2, "capacity_ah", line)?;
            let reference = number(&record, 3, "reference_ah", line)?;
            if reference <= 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("reference_ah must be positive, found {reference}"),
                });
            }
            ah / reference
        } else {
            number(&record, 2, "capacity", line)?
        };
        grouper.push(&record[0], CapacityMeasurement { day, capacity });
    }

    grouper
        .into_groups()
        .into_iter()
        .map(|(id, mut points)| {
            points.sort_by(|a, b| a.day.total_cmp(&b.day));
            if let Some(w) = points.windows(2).find(|w| w[0].day == w[1].day) {
                return Err(Error::Data(format!(
                    "cell {id}: duplicate measurement at day {}",
                    w[0].day
                )));
            }
            CapacityCurve::new(id, points)
        })
        .collect()
}

pub fn load_cells(path: impl AsRef<Path>) -> Result<Vec<CapacityCurve>> {
    read_cells(open(path.as_ref())?)
}

pub fn write_cells<W: Write>(mut out: W, curves: &[CapacityCurve]) -> std::io::Result<()> {
    writeln!(out, "cell_id,day,capacity")?;
    for curve in curves {
        for p in curve.points() {
            writeln!(out, "{},{},{}", curve.cell_id(), p.day, p.capacity)?;
        }
    }
    out.flush()
}

pub fn save_cells(path: impl AsRef<Path>, curves: &[CapacityCurve]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cells(BufWriter::new(file), curves).map_err(|e| Error::io(path, e))
}

pub fn read_profiles<R: Read>(input: R) -> Result<Vec<StressProfile>> {
    let mut rdr = reader(input);
    let header = header_fields(&mut rdr)?;
    if header != ["cell_id", "day_start", "day_end", "temp_c", "soc_pct"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("unrecognised profile header {header:?}"),
        });
    }
    let mut grouper = Grouper::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        expect_columns(&record, 5, line)?;
        let start = number(&record, 1, "day_start", line)?;
        let end = number(&record, 2, "day_end", line)?;
        let temp_c = number(&record, 3, "temp_c", line)?;
        let soc = number(&record, 4, "soc_pct", line)?;
        let segment = StressSegment::from_celsius(start, end, temp_c, soc)
            .map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        grouper.push(&record[0], segment);
    }
    grouper
        .into_groups()
        .into_iter()
        .map(|(id, mut segments)| {
            segments.sort_by(|a, b| a.day_start.total_cmp(&b.day_start));
            StressProfile::new(id, segments)
        })
        .collect()
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<StressProfile>> {
    read_profiles(open(path.as_ref())?)
}

/// Shortest Celsius text that reloads to exactly `kelvin`.
pub(crate) fn celsius_text(kelvin: f64) -> String {
    let celsius = kelvin - KELVIN_OFFSET;
    for digits in 0..=12 {
        let text = format!("{celsius:.digits$}");
        if text.parse::<f64>().map(|c| c + KELVIN_OFFSET) == Ok(kelvin) {
            return text;
        }
    }
    format!("{celsius}")
}

pub fn write_profiles<W: Write>(mut out: W, profiles: &[StressProfile]) -> std::io::Result<()> {
    writeln!(out, "cell_id,day_start,day_end,temp_c,soc_pct")?;
    for profile in profiles {
        for s in profile.segments() {
            writeln!(
                out,
                "{},{},{},{},{}",
                profile.cell_id(),
                s.day_start,
                s.day_end,
                celsius_text(s.temperature),
                s.soc
            )?;
        }
    }
    out.flush()
}

pub fn save_profiles(path: impl AsRef<Path>, profiles: &[StressProfile]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_profiles(BufWriter::new(file), profiles).map_err(|e| Error::io(path, e))
}

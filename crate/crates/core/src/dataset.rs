//! Gridded monthly time series, scalar observables, climatologies and the
//! synthetic generators used to exercise the forecasting pipeline.
//!
//! Two on-disk formats are supported:
//!
//! * CSV: header `month,var_1,...,var_d`, then one row per sample. An
//!   optional row starting with `area` directly after the header carries the
//!   grid-cell areas.
//! * Raw binary (`ACST`): magic, `u16` version, `N: u64`, `d: u64`,
//!   `dt_months: f64`, `epoch_month: i64`, a flag byte for cell-area
//!   presence, the optional `d` areas, then `N * d` row-major `f64` values.
//!   Everything is little-endian.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::rng;

const DATASET_MAGIC: &[u8; 4] = b"ACST";
const DATASET_VERSION: u16 = 1;

/// Calendar month (1..=12) of a month index. Month index 0 is a January.
pub fn calendar_month(month_index: i64) -> u8 {
    (month_index.rem_euclid(12) + 1) as u8
}

fn year_of(month_index: i64) -> f64 {
    month_index.div_euclid(12) as f64
}

/// A uniformly sampled multivariate series on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    timestamps: Vec<i64>,
    dt: i64,
    variable_name: String,
    cell_areas: Option<Vec<f64>>,
    calendar_month: Vec<u8>,
}

impl Dataset {
    /// Builds a dataset whose first sample sits at month `epoch_month`.
    pub fn new(
        variable_name: impl Into<String>,
        epoch_month: i64,
        dt: i64,
        values: Array2<f64>,
        cell_areas: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dt <= 0 {
            return Err(Error::InvalidArgument(format!("sampling step {dt} must be positive")));
        }
        let timestamps = (0..values.nrows() as i64).map(|i| epoch_month + i * dt).collect();
        Self::from_parts(variable_name.into(), timestamps, dt, values, cell_areas)
    }

    /// Builds a dataset from explicit timestamps, checking the constant stride.
    pub fn from_timestamps(
        variable_name: impl Into<String>,
        timestamps: Vec<i64>,
        values: Array2<f64>,
        cell_areas: Option<Vec<f64>>,
    ) -> Result<Self> {
        if timestamps.len() < 2 {
            return Err(Error::InvalidArgument("need at least two samples to infer the step".into()));
        }
        let dt = timestamps[1] - timestamps[0];
        if dt <= 0 {
            return Err(Error::NonUniformSampling {
                row: 1,
                expected: timestamps[0] + 1,
                found: timestamps[1],
            });
        }
        for (row, w) in timestamps.windows(2).enumerate() {
            if w[1] - w[0] != dt {
                return Err(Error::NonUniformSampling {
                    row: row + 1,
                    expected: w[0] + dt,
                    found: w[1],
                });
            }
        }
        Self::from_parts(variable_name.into(), timestamps, dt, values, cell_areas)
    }

    fn from_parts(
        variable_name: String,
        timestamps: Vec<i64>,
        dt: i64,
        values: Array2<f64>,
        cell_areas: Option<Vec<f64>>,
    ) -> Result<Self> {
        if values.nrows() != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} timestamps",
                values.nrows(),
                timestamps.len()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::Shape("dataset has no grid points".into()));
        }
        if let Some(((row, col), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value {v} at row {row}, column {col}"
            )));
        }
        if let Some(areas) = &cell_areas {
            if areas.len() != values.ncols() {
                return Err(Error::Shape(format!(
                    "{} cell areas for {} grid points",
                    areas.len(),
                    values.ncols()
                )));
            }
            if let Some((j, a)) = areas.iter().enumerate().find(|(_, a)| !(**a > 0.0 && a.is_finite())) {
                return Err(Error::InvalidArgument(format!("cell area {a} at column {j} must be positive")));
            }
        }
        let calendar_month = timestamps.iter().map(|&t| calendar_month(t)).collect();
        Ok(Self {
            values,
            timestamps,
            dt,
            variable_name,
            cell_areas,
            calendar_month,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn dt(&self) -> i64 {
        self.dt
    }

    pub fn variable_name(&self) -> &str {
        &self.variable_name
    }

    pub fn cell_areas(&self) -> Option<&[f64]> {
        self.cell_areas.as_deref()
    }

    pub fn calendar_month(&self) -> &[u8] {
        &self.calendar_month
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn grid_size(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.variable_name = name.into();
        self
    }

    /// Samples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} outside 0..{}",
                self.len()
            )));
        }
        Dataset::new(
            self.variable_name.clone(),
            self.timestamps[start],
            self.dt,
            self.values.slice(ndarray::s![start..end, ..]).to_owned(),
            self.cell_areas.clone(),
        )
    }
}

/// On-disk layout of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Csv,
    RawBinary,
}

impl DataFormat {
    /// `.csv` is CSV; anything else is treated as raw binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::RawBinary,
        }
    }
}

fn name_from_path(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("var")
        .to_string()
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Csv => load_csv(path),
        DataFormat::RawBinary => load_binary(path),
    }
}

pub fn write_dataset(path: &Path, format: DataFormat, data: &Dataset) -> Result<()> {
    match format {
        DataFormat::Csv => write_csv(path, data, None),
        DataFormat::RawBinary => write_binary(path, data),
    }
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };

    let mut lines = BufReader::new(file).lines().enumerate();
    let header = loop {
        let (_, line) = lines
            .next()
            .ok_or_else(|| parse_err(1, 1, "empty file".into()))?;
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() && !line.trim_start().starts_with('#') {
            break line;
        }
    };
    let fields: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if fields.first() != Some(&"month") {
        return Err(parse_err(1, 1, format!("header must start with `month`, got `{}`", fields[0])));
    }
    let d = fields.len() - 1;
    if d == 0 {
        return Err(parse_err(1, 2, "header declares no variables".into()));
    }
    for (j, f) in fields.iter().enumerate().skip(1) {
        if *f != format!("var_{j}") {
            return Err(parse_err(1, j + 1, format!("expected `var_{j}`, got `{f}`")));
        }
    }

    let mut areas = None;
    let mut months = Vec::new();
    let mut flat = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != d + 1 {
            return Err(parse_err(row, cells.len().min(d + 1), format!("expected {} fields, found {}", d + 1, cells.len())));
        }
        let parse_value = |column: usize, s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(row, column + 1, format!("`{s}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, column + 1, format!("non-finite value `{s}`")));
            }
            Ok(v)
        };
        if cells[0] == "area" {
            if areas.is_some() || !months.is_empty() {
                return Err(parse_err(row, 1, "`area` row must directly follow the header".into()));
            }
            let a = cells[1..]
                .iter()
                .enumerate()
                .map(|(j, s)| parse_value(j + 1, s))
                .collect::<Result<Vec<_>>>()?;
            areas = Some(a);
            continue;
        }
        let month: i64 = cells[0]
            .parse()
            .map_err(|_| parse_err(row, 1, format!("`{}` is not an integer month", cells[0])))?;
        if let (Some(&prev), Some(&first)) = (months.last(), months.first()) {
            let stride: i64 = if months.len() >= 2 { months[1] - first } else { month - prev };
            if month - prev != stride || stride <= 0 {
                return Err(Error::NonUniformSampling {
                    row,
                    expected: prev + stride.max(1),
                    found: month,
                });
            }
        }
        months.push(month);
        for (j, s) in cells[1..].iter().enumerate() {
            flat.push(parse_value(j + 1, s)?);
        }
    }
    if months.is_empty() {
        return Err(parse_err(2, 1, "no data rows".into()));
    }
    let n = months.len();
    let values = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::Shape(e.to_string()))?;
    if n == 1 {
        return Dataset::new(name_from_path(path), months[0], 1, values, areas);
    }
    Dataset::from_timestamps(name_from_path(path), months, values, areas)
}

/// CSV output preceded by a `# ...` comment line.
pub fn write_dataset_csv(path: &Path, data: &Dataset, header_comment: Option<&str>) -> Result<()> {
    write_csv(path, data, header_comment)
}

fn write_csv(path: &Path, data: &Dataset, header_comment: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        write!(w, "month")?;
        for j in 1..=data.grid_size() {
            write!(w, ",var_{j}")?;
        }
        writeln!(w)?;
        if let Some(areas) = data.cell_areas() {
            write!(w, "area")?;
            for a in areas {
                write!(w, ",{a:?}")?;
            }
            writeln!(w)?;
        }
        for (t, row) in data.timestamps.iter().zip(data.values.rows()) {
            write!(w, "{t}")?;
            for v in row {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

fn write_binary(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BinWriter::new(BufWriter::new(file));
    let res = (|| -> std::io::Result<()> {
        w.bytes(DATASET_MAGIC)?;
        w.u16(DATASET_VERSION)?;
        w.u64(data.len() as u64)?;
        w.u64(data.grid_size() as u64)?;
        w.f64(data.dt as f64)?;
        w.i64(data.timestamps[0])?;
        match data.cell_areas() {
            Some(areas) => {
                w.u8(1)?;
                w.f64s(areas)?;
            }
            None => w.u8(0)?,
        }
        w.f64s(data.values.iter())?;
        w.into_inner().flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

fn load_binary(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(file));
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let n = r.usize()?;
    let d = r.usize()?;
    let dt = r.f64()?;
    if !(dt > 0.0 && dt.fract() == 0.0) {
        return Err(Error::Format(format!("dt_months {dt} must be a positive whole number")));
    }
    let epoch = r.i64()?;
    let areas = match r.u8()? {
        0 => None,
        1 => Some(r.f64_vec(d)?),
        flag => return Err(Error::Format(format!("invalid cell-area flag {flag}"))),
    };
    let flat = r.f64_vec(n.checked_mul(d).ok_or_else(|| Error::Format("N * d overflows".into()))?)?;
    r.expect_eof()?;
    let values = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(name_from_path(path), epoch, dt as i64, values, areas)
}

/// Replaces entries of `data` with `fill` wherever `mask_source` is at or
/// above `threshold` (e.g. SST under sea ice set to -1.8).
pub fn fill_masked(data: &Dataset, mask_source: &Dataset, threshold: f64, fill: f64) -> Result<Dataset> {
    if data.values.dim() != mask_source.values.dim() || data.timestamps != mask_source.timestamps {
        return Err(Error::Shape("mask dataset must share shape and timestamps".into()));
    }
    let mut values = data.values.clone();
    ndarray::Zip::from(&mut values)
        .and(&mask_source.values)
        .for_each(|v, &m| {
            if m >= threshold {
                *v = fill;
            }
        });
    Dataset::new(data.variable_name.clone(), data.timestamps[0], data.dt, values, data.cell_areas.clone())
}

/// A scalar function of time, e.g. an area-integrated anomaly.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarObservable {
    values: Vec<f64>,
    timestamps: Vec<i64>,
}

impl ScalarObservable {
    pub fn new(values: Vec<f64>, timestamps: Vec<i64>) -> Result<Self> {
        if values.len() != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} values but {} timestamps",
                values.len(),
                timestamps.len()
            )));
        }
        Ok(Self { values, timestamps })
    }

    /// Consecutive months starting at 0.
    pub fn from_values(values: Vec<f64>) -> Self {
        let timestamps = (0..values.len() as i64).collect();
        Self { values, timestamps }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at month `t`, if sampled.
    pub fn at(&self, t: i64) -> Option<f64> {
        let first = *self.timestamps.first()?;
        if self.timestamps.len() == 1 {
            return (t == first).then(|| self.values[0]);
        }
        let dt = self.timestamps[1] - first;
        let offset = t - first;
        if offset < 0 || offset % dt != 0 {
            return None;
        }
        self.values.get((offset / dt) as usize).copied()
    }
}

/// Per-calendar-month baseline: a mean, optionally refined by a linear trend
/// over years for each month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Climatology {
    pub monthly_mean: [f64; 12],
    /// `(intercept, slope per year)` for each calendar month.
    pub per_month_trend: Option<[(f64, f64); 12]>,
}

impl Climatology {
    /// Baseline value at month index `t`.
    pub fn baseline(&self, t: i64) -> f64 {
        let m = calendar_month(t) as usize - 1;
        match &self.per_month_trend {
            Some(trend) => trend[m].0 + trend[m].1 * year_of(t),
            None => self.monthly_mean[m],
        }
    }

    /// Subtracts the baseline from an observable sampled on any record.
    pub fn anomaly(&self, obs: &ScalarObservable) -> ScalarObservable {
        let values = obs
            .values
            .iter()
            .zip(&obs.timestamps)
            .map(|(v, &t)| v - self.baseline(t))
            .collect();
        ScalarObservable {
            values,
            timestamps: obs.timestamps.clone(),
        }
    }
}

fn group_by_month(values: &[f64], timestamps: &[i64]) -> [Vec<(i64, f64)>; 12] {
    let mut groups: [Vec<(i64, f64)>; 12] = Default::default();
    for (&v, &t) in values.iter().zip(timestamps) {
        groups[calendar_month(t) as usize - 1].push((t, v));
    }
    groups
}

fn months_with_fewer_than(groups: &[Vec<(i64, f64)>; 12], k: usize) -> Vec<u8> {
    groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.len() < k)
        .map(|(m, _)| m as u8 + 1)
        .collect()
}

pub fn monthly_climatology(obs: &ScalarObservable) -> Result<Climatology> {
    let groups = group_by_month(&obs.values, &obs.timestamps);
    let missing = months_with_fewer_than(&groups, 1);
    if !missing.is_empty() {
        return Err(Error::MissingMonths(missing));
    }
    let mut monthly_mean = [0.0; 12];
    for (m, g) in groups.iter().enumerate() {
        monthly_mean[m] = g.iter().map(|(_, v)| v).sum::<f64>() / g.len() as f64;
    }
    Ok(Climatology {
        monthly_mean,
        per_month_trend: None,
    })
}

/// Fits an ordinary least-squares line over years for each calendar month.
pub fn fit_monthly_trend(obs: &ScalarObservable) -> Result<Climatology> {
    let groups = group_by_month(&obs.values, &obs.timestamps);
    let missing = months_with_fewer_than(&groups, 2);
    if !missing.is_empty() {
        return Err(Error::MissingMonths(missing));
    }
    let mut monthly_mean = [0.0; 12];
    let mut trend = [(0.0, 0.0); 12];
    for (m, g) in groups.iter().enumerate() {
        let n = g.len() as f64;
        let xbar = g.iter().map(|(t, _)| year_of(*t)).sum::<f64>() / n;
        let ybar = g.iter().map(|(_, v)| v).sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (t, v) in g {
            let dx = year_of(*t) - xbar;
            sxy += dx * (v - ybar);
            sxx += dx * dx;
        }
        let slope = sxy / sxx;
        monthly_mean[m] = ybar;
        trend[m] = (ybar - slope * xbar, slope);
    }
    Ok(Climatology {
        monthly_mean,
        per_month_trend: Some(trend),
    })
}

/// Removes a per-calendar-month linear trend fitted on `obs` itself.
pub fn detrend_monthly(obs: &ScalarObservable) -> Result<ScalarObservable> {
    Ok(fit_monthly_trend(obs)?.anomaly(obs))
}

/// Applies [`detrend_monthly`] to every grid column.
pub fn detrend_field_monthly(data: &Dataset) -> Result<Dataset> {
    let mut values = data.values.clone();
    for mut col in values.columns_mut() {
        let obs = ScalarObservable::new(col.to_vec(), data.timestamps.clone())?;
        let detrended = detrend_monthly(&obs)?;
        col.iter_mut().zip(detrended.values).for_each(|(c, v)| *c = v);
    }
    Dataset::new(data.variable_name.clone(), data.timestamps[0], data.dt, values, data.cell_areas.clone())
}

/// Area-weighted sum `sum_j c(v_j, t) a(v_j)` at every sample.
pub fn integrate(data: &Dataset) -> Result<ScalarObservable> {
    let areas = data.cell_areas().ok_or(Error::MissingCellAreas)?;
    let areas = ArrayView1::from(areas);
    let values = data.values.rows().into_iter().map(|row| row.dot(&areas)).collect();
    ScalarObservable::new(values, data.timestamps.clone())
}

/// Integrated anomaly relative to a (typically training-period) climatology.
pub fn integrated_anomaly(data: &Dataset, clim: &Climatology) -> Result<ScalarObservable> {
    Ok(clim.anomaly(&integrate(data)?))
}

/// Coefficients of one autoregressive regime `x(t+1) = mu + a x(t) + sigma e(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeCoefficients {
    pub mu: f64,
    pub a: f64,
    pub sigma: f64,
}

/// Generator for a Markov-switching AR(1) process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeArSpec {
    pub states: Vec<RegimeCoefficients>,
    pub transition: Vec<Vec<f64>>,
    pub n: usize,
    #[serde(default)]
    pub x0: f64,
    /// Zero-based initial regime.
    #[serde(default)]
    pub initial_state: usize,
    #[serde(default)]
    pub seed: u64,
}

pub(crate) fn check_row_stochastic(t: &[Vec<f64>], k: usize) -> Result<()> {
    if t.len() != k || t.iter().any(|r| r.len() != k) {
        return Err(Error::Shape(format!("transition matrix must be {k} x {k}")));
    }
    for (i, row) in t.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "transition row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

pub(crate) fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the cumulative sum; take the last state with mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Simulates the switching process. Returns the series and the zero-based
/// regime that generated each sample (entry 0 is the initial regime).
pub fn synth_regime_ar(spec: &RegimeArSpec) -> Result<(ScalarObservable, Vec<usize>)> {
    let k = spec.states.len();
    if k == 0 {
        return Err(Error::InvalidArgument("at least one regime is required".into()));
    }
    check_row_stochastic(&spec.transition, k)?;
    if spec.initial_state >= k {
        return Err(Error::InvalidArgument(format!("initial state {} out of range", spec.initial_state)));
    }
    for (i, s) in spec.states.iter().enumerate() {
        if !(s.a.abs() < 1.0) || !(s.sigma >= 0.0) || !s.mu.is_finite() {
            return Err(Error::InvalidArgument(format!("regime {i} needs |a| < 1 and sigma >= 0")));
        }
    }
    if spec.n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let mut rng = rng::seeded(spec.seed);
    let mut values = Vec::with_capacity(spec.n);
    let mut states = Vec::with_capacity(spec.n);
    let mut x = spec.x0;
    let mut s = spec.initial_state;
    values.push(x);
    states.push(s);
    for _ in 1..spec.n {
        s = sample_categorical(&mut rng, &spec.transition[s]);
        let c = spec.states[s];
        let e: f64 = rng.sample(StandardNormal);
        x = c.mu + c.a * x + c.sigma * e;
        values.push(x);
        states.push(s);
    }
    Ok((ScalarObservable::from_values(values), states))
}

/// Per-grid-point loadings of the modulated field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridLoading {
    pub annual_gain: f64,
    pub annual_phase: f64,
    pub low_freq_gain: f64,
    pub intermittent_gain: f64,
    pub intermittent_phase: f64,
}

/// Low-frequency factor that drifts up or down at a constant rate and flips
/// direction on reaching `±band`: a two-regime process whose switching is
/// driven by the state rather than by a Markov chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingFactor {
    /// Change per step while in a regime.
    pub drift: f64,
    pub band: f64,
    /// Standard deviation of the random increment per step.
    pub noise: f64,
}

/// Parameters of [`synth_modulated_field`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModulatedFieldSpec {
    pub d: usize,
    pub n: usize,
    /// `periods[0]` is the carrier (annual) period in months; later entries
    /// are periods of sinusoidal low-frequency components.
    pub periods: Vec<f64>,
    pub annual_amplitude: f64,
    pub low_freq_amplitude: f64,
    pub intermittent_amplitude: f64,
    pub switching: Option<SwitchingFactor>,
    /// Amplitude of white noise shared by all grid points (scaled by the
    /// low-frequency loading).
    pub coherent_noise: f64,
    /// Amplitude of independent white noise at each grid point.
    pub noise: f64,
    /// Explicit loadings; drawn from the seed when absent.
    pub loadings: Option<Vec<GridLoading>>,
    pub epoch_month: i64,
    pub seed: u64,
}

impl Default for ModulatedFieldSpec {
    fn default() -> Self {
        Self {
            d: 8,
            n: 1440,
            periods: vec![12.0, 96.0],
            annual_amplitude: 1.0,
            low_freq_amplitude: 0.6,
            intermittent_amplitude: 0.3,
            switching: None,
            coherent_noise: 0.0,
            noise: 0.05,
            loadings: None,
            epoch_month: 0,
            seed: 0,
        }
    }
}

impl ModulatedFieldSpec {
    /// Human-readable generative formula, stored next to generated files.
    pub fn formula(&self) -> String {
        let mut s = String::new();
        s.push_str("z_j(t) = A_ann * g_j * cos(2 pi t / P0 + phi_j)\n");
        s.push_str("       + h_j * (A_lf * L(t) + c_noise * e(t))\n");
        s.push_str("       + A_int * k_j * L(t) * cos(2 pi t / P0 + psi_j)\n");
        s.push_str("       + noise * eps_j(t)\n");
        s.push_str("L(t) = sum_{k>=1} sin(2 pi t / P_k + theta_k) + S(t)\n");
        s.push_str("S(t+1) = S(t) + drift * r(t) + s_noise * eta(t), r flips to -1 at S >= band and to +1 at S <= -band\n");
        s.push_str("e, eps_j, eta ~ N(0, 1) i.i.d.; g, h, k ~ U[0.5, 1.5]; phases ~ U[0, 2 pi)\n");
        s.push_str("cell area a_j = cos(latitude_j), latitudes evenly spaced over 20..65 degrees\n");
        s.push_str(&format!(
            "d = {}, n = {}, periods = {:?}, A_ann = {}, A_lf = {}, A_int = {}, c_noise = {}, noise = {}, seed = {}\n",
            self.d,
            self.n,
            self.periods,
            self.annual_amplitude,
            self.low_freq_amplitude,
            self.intermittent_amplitude,
            self.coherent_noise,
            self.noise,
            self.seed
        ));
        if let Some(sw) = &self.switching {
            s.push_str(&format!("switching: drift = {}, band = {}, s_noise = {}\n", sw.drift, sw.band, sw.noise));
        }
        s
    }
}

/// Annual cycle plus low-frequency modulation plus noise on a small grid.
pub fn synth_modulated_field(spec: &ModulatedFieldSpec) -> Result<Dataset> {
    if spec.d < 4 {
        return Err(Error::InvalidArgument(format!("d = {} must be at least 4", spec.d)));
    }
    if spec.periods.is_empty() || spec.periods.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::InvalidArgument("periods must be non-empty and positive".into()));
    }
    let max_period = spec.periods.iter().cloned().fold(0.0, f64::max);
    if (spec.n as f64) < 10.0 * max_period {
        return Err(Error::InvalidArgument(format!(
            "n = {} must be at least ten times the longest period {max_period}",
            spec.n
        )));
    }
    let mut rng = rng::seeded(spec.seed);
    let loadings: Vec<GridLoading> = match &spec.loadings {
        Some(l) if l.len() == spec.d => l.clone(),
        Some(l) => {
            return Err(Error::Shape(format!("{} loadings for {} grid points", l.len(), spec.d)));
        }
        None => (0..spec.d)
            .map(|_| GridLoading {
                annual_gain: rng.random_range(0.5..1.5),
                annual_phase: rng.random_range(0.0..2.0 * PI),
                low_freq_gain: rng.random_range(0.5..1.5),
                intermittent_gain: rng.random_range(0.5..1.5),
                intermittent_phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect(),
    };
    let lf_phases: Vec<f64> = spec.periods[1..]
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();

    let carrier = spec.periods[0];
    let mut values = Array2::zeros((spec.n, spec.d));
    let mut s_state = 0.0;
    let mut direction = 1.0;
    for t in 0..spec.n {
        let tf = t as f64;
        let mut lf: f64 = spec.periods[1..]
            .iter()
            .zip(&lf_phases)
            .map(|(p, th)| (2.0 * PI * tf / p + th).sin())
            .sum();
        if let Some(sw) = &spec.switching {
            if t > 0 {
                let eta: f64 = rng.sample(StandardNormal);
                s_state += sw.drift * direction + sw.noise * eta;
                if s_state >= sw.band {
                    direction = -1.0;
                } else if s_state <= -sw.band {
                    direction = 1.0;
                }
            }
            lf += s_state;
        }
        let shared: f64 = if spec.coherent_noise > 0.0 {
            spec.coherent_noise * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        for (j, g) in loadings.iter().enumerate() {
            let phase = 2.0 * PI * tf / carrier;
            let mut v = spec.annual_amplitude * g.annual_gain * (phase + g.annual_phase).cos()
                + g.low_freq_gain * (spec.low_freq_amplitude * lf + shared)
                + spec.intermittent_amplitude * g.intermittent_gain * lf * (phase + g.intermittent_phase).cos();
            if spec.noise > 0.0 {
                v += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
            values[[t, j]] = v;
        }
    }
    let areas = (0..spec.d)
        .map(|j| {
            let lat = 20.0 + 45.0 * j as f64 / (spec.d - 1) as f64;
            lat.to_radians().cos()
        })
        .collect();
    Dataset::new("field", spec.epoch_month, 1, values, Some(areas))
}

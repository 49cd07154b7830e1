//! Kernel ensemble analog forecasting.
//!
//! A test state `y` induces a probability distribution `p_y` over training
//! analogs. The forecast at lead `tau` averages the observable `tau` steps
//! after each analog: `f(y, tau) = E_{p_y} S_tau f`. Analogs whose future
//! leaves the training record are dropped and the rest renormalized.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::binio::{BinReader, BinWriter};
use crate::embedding::{EmbeddedPoint, EmbeddedSeries};
use crate::error::{Error, Result};
use crate::kernels::check_cross;
use crate::ose::{GhModel, LpModel};
use crate::par::map_indexed;

/// `S_s f`: the observable `s` samples later, defined on the first
/// `len - s` samples.
pub fn shift(f: &[f64], s: usize) -> Result<Vec<f64>> {
    if s >= f.len() {
        return Err(Error::ShiftTooLarge { shift: s, len: f.len() });
    }
    Ok(f[s..].to_vec())
}

/// Analog indices by descending weight, earlier index first on ties.
pub fn rank_analogs(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
}

/// Keeps the `n_n` largest weights and renormalizes them to sum to one.
pub fn truncate_ensemble(weights: &[f64], n_n: usize) -> Result<Vec<f64>> {
    if n_n == 0 || n_n > weights.len() {
        return Err(Error::InvalidArgument(format!(
            "ensemble size {n_n} outside 1..={}",
            weights.len()
        )));
    }
    if n_n == weights.len() {
        return Ok(weights.to_vec());
    }
    let order = rank_analogs(weights);
    let kept = &order[..n_n];
    let total: f64 = kept.iter().map(|&k| weights[k]).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroRow(0));
    }
    let mut out = vec![0.0; weights.len()];
    for &k in kept {
        out[k] = weights[k] / total;
    }
    Ok(out)
}

/// The `n_n` best analogs `k` with `k + s` inside the record, with
/// renormalized weights.
fn select(weights: &[f64], order: &[usize], s: usize, n_n: usize) -> Result<Vec<(usize, f64)>> {
    let n = weights.len();
    let mut out: Vec<(usize, f64)> = order
        .iter()
        .copied()
        .filter(|&k| k + s < n)
        .take(n_n)
        .map(|k| (k, weights[k]))
        .collect();
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    if out.is_empty() || !(total > 0.0) {
        return Err(Error::NoValidAnalogs { shift: s });
    }
    for (_, w) in &mut out {
        *w /= total;
    }
    Ok(out)
}

/// One prediction with what it read from the training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeafAudit {
    pub value: f64,
    /// Bounds of the averaged values over the analog support. For the pyramid
    /// they are summed over levels.
    pub support_min: f64,
    pub support_max: f64,
    /// Largest training index whose value entered the average.
    pub max_index_read: usize,
}

fn average(selected: &[(usize, f64)], h: &[f64], s: usize) -> KeafAudit {
    let mut audit = KeafAudit {
        value: 0.0,
        support_min: f64::INFINITY,
        support_max: f64::NEG_INFINITY,
        max_index_read: 0,
    };
    for &(k, w) in selected {
        let v = h[k + s];
        audit.value += w * v;
        audit.support_min = audit.support_min.min(v);
        audit.support_max = audit.support_max.max(v);
        audit.max_index_read = audit.max_index_read.max(k + s);
    }
    audit
}

fn check_lead(s: usize, n: usize) -> Result<()> {
    if s >= n {
        return Err(Error::ShiftTooLarge { shift: s, len: n });
    }
    Ok(())
}

/// GH forecast `sum_j <phi_j, f> (1 / lambda'_j) sum_k p_k phi_j(x_{k+s})`
/// with the analog weights masked and truncated before the eigenvalue scaling.
pub fn keaf_gh_audit(model: &GhModel, y: &EmbeddedPoint, s: usize, n_n: usize) -> Result<KeafAudit> {
    check_lead(s, model.train.len())?;
    let w = model.weights(y)?;
    let order = rank_analogs(&w);
    Ok(average(&select(&w, &order, s, n_n)?, model.lifted(), s))
}

pub fn keaf_gh(model: &GhModel, y: &EmbeddedPoint, s: usize, n_n: usize) -> Result<f64> {
    keaf_gh_audit(model, y, s, n_n).map(|a| a.value)
}

/// LP forecast `sum_l E_{p_{y,l}} S_s d_l`, `d_0 = f`.
pub fn keaf_lp_audit(model: &LpModel, y: &EmbeddedPoint, s: usize, n_n: usize) -> Result<KeafAudit> {
    check_lead(s, model.train.len())?;
    let mut total = KeafAudit {
        value: 0.0,
        support_min: 0.0,
        support_max: 0.0,
        max_index_read: 0,
    };
    for (l, level) in model.levels.iter().enumerate() {
        let w = model.weights(l, y)?;
        let order = rank_analogs(&w);
        let a = average(&select(&w, &order, s, n_n)?, &level.residual, s);
        total.value += a.value;
        total.support_min += a.support_min;
        total.support_max += a.support_max;
        total.max_index_read = total.max_index_read.max(a.max_index_read);
    }
    Ok(total)
}

pub fn keaf_lp(model: &LpModel, y: &EmbeddedPoint, s: usize, n_n: usize) -> Result<f64> {
    keaf_lp_audit(model, y, s, n_n).map(|a| a.value)
}

pub fn persistence(y0: f64, _lead: usize) -> f64 {
    y0
}

/// Which forecaster [`run_forecasts`] drives.
#[derive(Debug, Clone, Copy)]
pub enum Forecaster<'a> {
    Gh(&'a GhModel),
    Lp(&'a LpModel),
    /// Initial values of the observable at each test point.
    Persistence(&'a [f64]),
}

impl Forecaster<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Forecaster::Gh(_) => "keaf-gh",
            Forecaster::Lp(_) => "keaf-lp",
            Forecaster::Persistence(_) => "persistence",
        }
    }
}

/// Training samples dropped at one lead because their future is unrecorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExcludedSamples {
    pub lead: i64,
    /// First excluded training index; all later ones are excluded too.
    pub first: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRun {
    pub method: String,
    /// Leads in months.
    pub leads: Vec<i64>,
    /// `n' x leads`.
    pub predictions: Array2<f64>,
    pub init_timestamps: Vec<i64>,
    pub l_trunc: Option<usize>,
    pub tolerance: Option<f64>,
    pub n_n: Option<usize>,
    pub excluded: Vec<ExcludedSamples>,
}

impl ForecastRun {
    pub fn lead_steps(&self, dt: i64) -> Vec<usize> {
        self.leads.iter().map(|l| (l / dt) as usize).collect()
    }
}

/// Converts leads in months to sample shifts.
pub fn lead_shifts(leads: &[i64], dt: i64) -> Result<Vec<usize>> {
    leads
        .iter()
        .map(|&l| {
            if l < 0 || l % dt != 0 {
                Err(Error::InvalidArgument(format!("lead {l} is not a non-negative multiple of dt = {dt}")))
            } else {
                Ok((l / dt) as usize)
            }
        })
        .collect()
}

/// Predictions for every test sample and lead. `n_n = None` uses all analogs.
pub fn run_forecasts(
    forecaster: Forecaster,
    test: &EmbeddedSeries,
    leads: &[i64],
    n_n: Option<usize>,
) -> Result<ForecastRun> {
    let shifts = lead_shifts(leads, test.dt())?;
    let m = test.len();
    let (train_len, l_trunc, tolerance) = match forecaster {
        Forecaster::Gh(g) => {
            check_cross(test, &g.train, &g.spec)?;
            (Some(g.train.len()), Some(g.l_trunc), None)
        }
        Forecaster::Lp(l) => {
            check_cross(test, &l.train, &l.base)?;
            (Some(l.train.len()), None, Some(l.tolerance))
        }
        Forecaster::Persistence(v) => {
            if v.len() != m {
                return Err(Error::Shape(format!("{} initial values for {m} test points", v.len())));
            }
            (None, None, None)
        }
    };
    if let Some(n) = train_len {
        if let Some(&s) = shifts.iter().max() {
            check_lead(s, n)?;
        }
        if let Some(k) = n_n {
            if k == 0 || k > n {
                return Err(Error::InvalidArgument(format!("ensemble size {k} outside 1..={n}")));
            }
        }
    }
    let keep = n_n.unwrap_or(usize::MAX);
    let rows = map_indexed(m, |j| -> Result<Vec<f64>> {
        let y = test.point(j);
        match forecaster {
            Forecaster::Gh(g) => {
                let w = g.weights(&y)?;
                let order = rank_analogs(&w);
                shifts
                    .iter()
                    .map(|&s| Ok(average(&select(&w, &order, s, keep)?, g.lifted(), s).value))
                    .collect()
            }
            Forecaster::Lp(model) => {
                let mut out = vec![0.0; shifts.len()];
                for (l, level) in model.levels.iter().enumerate() {
                    let w = model.weights(l, &y)?;
                    let order = rank_analogs(&w);
                    for (o, &s) in out.iter_mut().zip(&shifts) {
                        *o += average(&select(&w, &order, s, keep)?, &level.residual, s).value;
                    }
                }
                Ok(out)
            }
            Forecaster::Persistence(v) => Ok(shifts.iter().map(|&s| persistence(v[j], s)).collect()),
        }
    });
    let mut predictions = Array2::zeros((m, shifts.len()));
    for (j, row) in rows.into_iter().enumerate() {
        let row = row?;
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite prediction at test {j}, lead {}", leads[c])));
        }
        for (c, v) in row.into_iter().enumerate() {
            predictions[[j, c]] = v;
        }
    }
    let excluded = match train_len {
        Some(n) => leads
            .iter()
            .zip(&shifts)
            .map(|(&lead, &s)| ExcludedSamples {
                lead,
                first: n - s,
                count: s,
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(ForecastRun {
        method: forecaster.label().to_string(),
        leads: leads.to_vec(),
        predictions,
        init_timestamps: test.timestamps().to_vec(),
        l_trunc,
        tolerance,
        n_n: train_len.map(|n| n_n.unwrap_or(n)),
        excluded,
    })
}

/// Writes `init_month,lead,prediction,truth,method`, one row per test point
/// and lead. Missing truth is an empty field.
pub fn write_forecast_csv(
    path: &Path,
    run: &ForecastRun,
    truth: Option<&Array2<Option<f64>>>,
    header_comment: Option<&str>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "init_month,lead,prediction,truth,method")?;
        for (j, t0) in run.init_timestamps.iter().enumerate() {
            for (c, lead) in run.leads.iter().enumerate() {
                let truth = truth.and_then(|t| t[[j, c]]).map(|v| v.to_string()).unwrap_or_default();
                writeln!(w, "{t0},{lead},{},{truth},{}", run.predictions[[j, c]], run.method)?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Reads the prediction columns of a forecast CSV back into a run.
pub fn read_forecast_csv(path: &Path) -> Result<ForecastRun> {
    read_forecast_csv_with_truth(path).map(|(run, _)| run)
}

/// Reads a forecast CSV together with its truth column.
pub fn read_forecast_csv_with_truth(path: &Path) -> Result<(ForecastRun, Array2<Option<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(i64, i64, f64, String, Option<f64>)> = Vec::new();
    let mut header_seen = false;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != "init_month,lead,prediction,truth,method" {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: idx + 1,
                    column: 1,
                    message: "unexpected header".into(),
                });
            }
            header_seen = true;
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let bad = |column: usize, message: &str| Error::Parse {
            path: path.to_path_buf(),
            row: idx + 1,
            column,
            message: message.into(),
        };
        if cells.len() != 5 {
            return Err(bad(1, "expected 5 fields"));
        }
        rows.push((
            cells[0].parse().map_err(|_| bad(1, "bad month"))?,
            cells[1].parse().map_err(|_| bad(2, "bad lead"))?,
            cells[2].parse().map_err(|_| bad(3, "bad prediction"))?,
            cells[4].to_string(),
            match cells[3] {
                "" => None,
                t => Some(t.parse().map_err(|_| bad(4, "bad truth"))?),
            },
        ));
    }
    let mut init: Vec<i64> = Vec::new();
    let mut leads: Vec<i64> = Vec::new();
    for r in &rows {
        if init.last() != Some(&r.0) {
            init.push(r.0);
        }
        if init.len() == 1 {
            leads.push(r.1);
        }
    }
    if rows.len() != init.len() * leads.len() || leads.is_empty() {
        return Err(Error::Format(format!("{}: ragged forecast table", path.display())));
    }
    let predictions = Array2::from_shape_vec((init.len(), leads.len()), rows.iter().map(|r| r.2).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    let truth = Array2::from_shape_vec((init.len(), leads.len()), rows.iter().map(|r| r.4).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    let run = ForecastRun {
        method: rows[0].3.clone(),
        leads,
        predictions,
        init_timestamps: init,
        l_trunc: None,
        tolerance: None,
        n_n: None,
        excluded: Vec::new(),
    };
    Ok((run, truth))
}

const FRUN_MAGIC: &[u8; 4] = b"FRUN";
const FRUN_VERSION: u16 = 1;

fn opt_u64<W: Write>(w: &mut BinWriter<W>, v: Option<u64>) -> std::io::Result<()> {
    match v {
        Some(v) => {
            w.u8(1)?;
            w.u64(v)
        }
        None => w.u8(0),
    }
}

/// Binary mirror of a run: method, leads, initial months, parameters,
/// excluded-sample log and row-major predictions.
pub fn write_forecast_binary(path: &Path, run: &ForecastRun) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BinWriter::new(BufWriter::new(file));
    let res = (|| -> std::io::Result<()> {
        w.bytes(FRUN_MAGIC)?;
        w.u16(FRUN_VERSION)?;
        w.u64(run.method.len() as u64)?;
        w.bytes(run.method.as_bytes())?;
        w.u64(run.leads.len() as u64)?;
        for l in &run.leads {
            w.i64(*l)?;
        }
        w.u64(run.init_timestamps.len() as u64)?;
        for t in &run.init_timestamps {
            w.i64(*t)?;
        }
        opt_u64(&mut w, run.l_trunc.map(|v| v as u64))?;
        opt_u64(&mut w, run.tolerance.map(f64::to_bits))?;
        opt_u64(&mut w, run.n_n.map(|v| v as u64))?;
        w.u64(run.excluded.len() as u64)?;
        for e in &run.excluded {
            w.i64(e.lead)?;
            w.u64(e.first as u64)?;
            w.u64(e.count as u64)?;
        }
        w.f64s(run.predictions.iter())?;
        w.into_inner().flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_forecast_binary(path: &Path) -> Result<ForecastRun> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(file));
    r.magic(FRUN_MAGIC)?;
    r.version(FRUN_VERSION)?;
    let len = r.usize()?;
    if len > 1024 {
        return Err(Error::Format("method label too long".into()));
    }
    let mut label = Vec::with_capacity(len);
    for _ in 0..len {
        label.push(r.u8()?);
    }
    let method = String::from_utf8(label).map_err(|e| Error::Format(e.to_string()))?;
    let read_i64s = |r: &mut BinReader<_>| -> Result<Vec<i64>> {
        let n = r.usize()?;
        if n as u64 > 1u64 << 32 {
            return Err(Error::Format("implausible length".into()));
        }
        (0..n).map(|_| r.i64()).collect()
    };
    let leads = read_i64s(&mut r)?;
    let init_timestamps = read_i64s(&mut r)?;
    let opt = |r: &mut BinReader<_>| -> Result<Option<u64>> {
        match r.u8()? {
            0 => Ok(None),
            1 => Ok(Some(r.u64()?)),
            f => Err(Error::Format(format!("bad option flag {f}"))),
        }
    };
    let l_trunc = opt(&mut r)?.map(|v| v as usize);
    let tolerance = opt(&mut r)?.map(f64::from_bits);
    let n_n = opt(&mut r)?.map(|v| v as usize);
    let count = r.usize()?;
    if count > leads.len() {
        return Err(Error::Format("excluded log longer than lead list".into()));
    }
    let mut excluded = Vec::with_capacity(count);
    for _ in 0..count {
        excluded.push(ExcludedSamples {
            lead: r.i64()?,
            first: r.usize()?,
            count: r.usize()?,
        });
    }
    let (m, l) = (init_timestamps.len(), leads.len());
    let predictions =
        Array2::from_shape_vec((m, l), r.f64_vec(m.saturating_mul(l))?).map_err(|e| Error::Format(e.to_string()))?;
    r.expect_eof()?;
    Ok(ForecastRun {
        method,
        leads,
        predictions,
        init_timestamps,
        l_trunc,
        tolerance,
        n_n,
        excluded,
    })
}

//! Forecast skill: RMSE and pattern correlation per lead, the truth they are
//! measured against, and the lead at which correlation drops below a
//! threshold.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddedSeries;
use crate::error::{Error, Result};
use crate::forecast::{lead_shifts, ForecastRun};
use crate::ose::{gh_extend, lp_extend, GhModel, LpModel};
use crate::par::map_indexed;

pub const DEFAULT_PC_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthMode {
    /// The observable computed directly from the test record.
    Objective,
    /// The out-of-sample extension evaluated at the shifted test point.
    Ose,
}

impl TruthMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TruthMode::Objective => "objective",
            TruthMode::Ose => "ose",
        }
    }
}

/// Truth per (test point, lead); `None` where the shifted point leaves the
/// test record.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub leads: Vec<i64>,
    pub values: Array2<Option<f64>>,
    pub mode: TruthMode,
}

impl Truth {
    /// Shifts a per-test-point series to every lead.
    pub fn from_series(series: &[f64], leads: &[i64], dt: i64, mode: TruthMode) -> Result<Truth> {
        let shifts = lead_shifts(leads, dt)?;
        let m = series.len();
        if let Some(&s) = shifts.iter().max() {
            if s >= m {
                return Err(Error::InvalidArgument(format!(
                    "lead of {s} samples leaves no valid initial condition in a test record of {m}"
                )));
            }
        }
        let values = Array2::from_shape_fn((m, shifts.len()), |(j, c)| series.get(j + shifts[c]).copied());
        Ok(Truth {
            leads: leads.to_vec(),
            values,
            mode,
        })
    }

    /// Number of valid initial conditions per lead.
    pub fn n_used(&self) -> Vec<usize> {
        self.values.columns().into_iter().map(|c| c.iter().flatten().count()).collect()
    }
}

/// Truth for an observable computed directly on the test record.
pub fn objective_truth(observable: &[f64], leads: &[i64], dt: i64) -> Result<Truth> {
    Truth::from_series(observable, leads, dt, TruthMode::Objective)
}

#[derive(Debug, Clone, Copy)]
pub enum OseModel<'a> {
    Gh(&'a GhModel),
    Lp(&'a LpModel),
}

/// `truth(j, tau) = f(y_{j + tau})` with `f` extended out of sample.
pub fn truth_ose(test: &EmbeddedSeries, model: OseModel, leads: &[i64]) -> Result<Truth> {
    let values = map_indexed(test.len(), |j| match model {
        OseModel::Gh(g) => gh_extend(g, &test.point(j)),
        OseModel::Lp(l) => lp_extend(l, &test.point(j)),
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Truth::from_series(&values, leads, test.dt(), TruthMode::Ose)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len() as f64;
    (pred.iter().zip(truth).map(|(y, x)| (y - x).powi(2)).sum::<f64>() / n).sqrt()
}

/// `(1/n) sum (y - ybar)(x - xbar) / (sigma_y sigma_x)` with population
/// standard deviations; `None` when either variance is zero.
pub fn pattern_correlation(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return None;
    }
    let ym = pred.iter().sum::<f64>() / n;
    let xm = truth.iter().sum::<f64>() / n;
    let sy = (pred.iter().map(|y| (y - ym).powi(2)).sum::<f64>() / n).sqrt();
    let sx = (truth.iter().map(|x| (x - xm).powi(2)).sum::<f64>() / n).sqrt();
    if !(sy > 0.0 && sx > 0.0) {
        return None;
    }
    let c = pred.iter().zip(truth).map(|(y, x)| (y - ym) * (x - xm)).sum::<f64>() / n / (sy * sx);
    Some(c.clamp(-1.0, 1.0))
}

fn paired(run: &ForecastRun, truth: &Truth, c: usize) -> (Vec<f64>, Vec<f64>) {
    run.predictions
        .column(c)
        .iter()
        .zip(truth.values.column(c))
        .filter_map(|(&p, t)| t.map(|t| (p, t)))
        .unzip()
}

fn check_shapes(run: &ForecastRun, truth: &Truth) -> Result<()> {
    if run.leads != truth.leads || run.predictions.dim() != truth.values.dim() {
        return Err(Error::Shape(format!(
            "forecast {:?} over leads {:?} vs truth {:?} over leads {:?}",
            run.predictions.dim(),
            run.leads,
            truth.values.dim(),
            truth.leads
        )));
    }
    Ok(())
}

pub fn rmse_curve(run: &ForecastRun, truth: &Truth) -> Result<Vec<f64>> {
    check_shapes(run, truth)?;
    (0..run.leads.len())
        .map(|c| {
            let (p, t) = paired(run, truth, c);
            if p.is_empty() {
                return Err(Error::InvalidArgument(format!("no valid truth at lead {}", run.leads[c])));
            }
            Ok(rmse(&p, &t))
        })
        .collect()
}

pub fn pc_curve(run: &ForecastRun, truth: &Truth) -> Result<Vec<Option<f64>>> {
    check_shapes(run, truth)?;
    Ok((0..run.leads.len())
        .map(|c| {
            let (p, t) = paired(run, truth, c);
            pattern_correlation(&p, &t)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillCurves {
    pub leads: Vec<i64>,
    pub rmse: Vec<f64>,
    /// `None` where a variance vanished.
    pub pc: Vec<Option<f64>>,
    pub n_used: Vec<usize>,
    pub method: String,
    pub truth_mode: TruthMode,
}

pub fn skill_curves(run: &ForecastRun, truth: &Truth) -> Result<SkillCurves> {
    Ok(SkillCurves {
        leads: run.leads.clone(),
        rmse: rmse_curve(run, truth)?,
        pc: pc_curve(run, truth)?,
        n_used: truth.n_used(),
        method: run.method.clone(),
        truth_mode: truth.mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// Index of the first lead with correlation below the threshold.
    Index(usize),
    BeyondRange,
}

/// First lead whose correlation falls below `threshold`. Missing values are
/// skipped.
pub fn horizon(pc: &[Option<f64>], threshold: f64) -> Horizon {
    pc.iter()
        .position(|v| matches!(v, Some(v) if *v < threshold))
        .map_or(Horizon::BeyondRange, Horizon::Index)
}

impl SkillCurves {
    pub fn horizon(&self, threshold: f64) -> Horizon {
        horizon(&self.pc, threshold)
    }

    /// Horizon in months, `None` when beyond the evaluated range.
    pub fn horizon_lead(&self, threshold: f64) -> Option<i64> {
        match self.horizon(threshold) {
            Horizon::Index(i) => Some(self.leads[i]),
            Horizon::BeyondRange => None,
        }
    }
}

/// Writes `lead,rmse,pc,n_used,method,truth_mode`; missing correlations are
/// empty fields.
pub fn write_skill_csv(path: &Path, curves: &[SkillCurves], header_comment: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "lead,rmse,pc,n_used,method,truth_mode")?;
        for s in curves {
            for i in 0..s.leads.len() {
                let pc = s.pc[i].map(|v| v.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{pc},{},{},{}",
                    s.leads[i],
                    s.rmse[i],
                    s.n_used[i],
                    s.method,
                    s.truth_mode.as_str()
                )?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Writes `method,truth_mode,threshold,horizon`, with `beyond-range` when the
/// correlation never drops below the threshold.
pub fn write_horizon_csv(
    path: &Path,
    curves: &[SkillCurves],
    threshold: f64,
    header_comment: Option<&str>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "method,truth_mode,threshold,horizon")?;
        for s in curves {
            let h = s
                .horizon_lead(threshold)
                .map(|l| l.to_string())
                .unwrap_or_else(|| "beyond-range".into());
            writeln!(w, "{},{},{threshold},{h}", s.method, s.truth_mode.as_str())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

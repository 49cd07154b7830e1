//! WebAssembly bindings for the static page in `www/`. Each exported function
//! returns a JSON document; the plain Rust versions are used by native tests.

use analogcast_core::baselines::{count_switches, fit_cluster_ar};
use analogcast_core::dataset::{
    integrate, monthly_climatology, synth_modulated_field, synth_regime_ar, Dataset, ModulatedFieldSpec,
    RegimeArSpec, RegimeCoefficients, SwitchingFactor,
};
use analogcast_core::embedding::{embed, EmbeddedSeries};
use analogcast_core::forecast::{run_forecasts, Forecaster};
use analogcast_core::kernels::{build_matrix, exponent_row, KernelSpec};
use analogcast_core::laplacian::{decompose, mode_diagnostics, InnerProduct};
use analogcast_core::metrics::{objective_truth, skill_curves, DEFAULT_PC_THRESHOLD};
use analogcast_core::ose::lp_fit;
use analogcast_core::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn field(n: usize, seed: u64) -> Result<Dataset> {
    synth_modulated_field(&ModulatedFieldSpec {
        n,
        periods: vec![12.0],
        low_freq_amplitude: 0.3,
        intermittent_amplitude: 1.5,
        noise: 0.3,
        switching: Some(SwitchingFactor {
            drift: 0.02,
            band: 1.0,
            noise: 0.02,
        }),
        seed,
        ..ModulatedFieldSpec::default()
    })
}

fn nlsa_spec(train: &EmbeddedSeries, factor: f64) -> KernelSpec {
    let unit = KernelSpec::nlsa(1.0);
    let mut e: Vec<f64> = (0..train.len())
        .step_by(4)
        .flat_map(|i| exponent_row(&train.point(i), train, &unit).into_iter().skip(i + 1))
        .collect();
    e.sort_by(f64::total_cmp);
    KernelSpec::nlsa(factor * e[e.len() / 2])
}

#[derive(Debug, Serialize)]
pub struct Mode {
    pub index: usize,
    pub lambda: f64,
    pub class: String,
    pub period: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Decomposition {
    pub observable: Vec<f64>,
    pub modes: Vec<Mode>,
}

/// Leading eigenfunctions of a synthetic modulated field.
pub fn decomposition(n: usize, q: usize, count: usize, factor: f64, seed: u64) -> Result<Decomposition> {
    let data = field(n + q, seed)?;
    let emb = embed(&data, q)?.with_velocities()?;
    let kernel = build_matrix(&emb, &nlsa_spec(&emb, factor))?;
    let basis = decompose(&kernel, count.min(emb.len()), InnerProduct::Degree)?;
    let obs = integrate(&data)?;
    let mut modes = Vec::new();
    for j in 0..basis.count() {
        let phi = basis.eigenfunctions.column(j).to_vec();
        let (class, period) = if j == 0 {
            ("constant".to_string(), f64::INFINITY)
        } else {
            let d = mode_diagnostics(&phi, 1.0)?;
            (d.class.as_str().to_string(), d.dominant_period)
        };
        modes.push(Mode {
            index: j + 1,
            lambda: basis.eigenvalues[j],
            class,
            period,
            values: phi,
        });
    }
    Ok(Decomposition {
        observable: obs.values()[q..].to_vec(),
        modes,
    })
}

#[derive(Debug, Serialize)]
pub struct SkillComparison {
    pub leads: Vec<i64>,
    pub keaf_pc: Vec<Option<f64>>,
    pub persistence_pc: Vec<Option<f64>>,
    pub keaf_rmse: Vec<f64>,
    pub persistence_rmse: Vec<f64>,
    pub keaf_horizon: Option<i64>,
    pub persistence_horizon: Option<i64>,
}

/// Laplacian-pyramid analog forecasts of the integrated anomaly against
/// persistence, trained on the first half of the record.
pub fn skill_comparison(n_train: usize, q: usize, max_lead: i64, factor: f64, seed: u64) -> Result<SkillComparison> {
    let total = 2 * (n_train + q);
    let data = field(total, seed)?;
    let train = data.slice(0, n_train + q)?;
    let test = data.slice(n_train + q, total)?;
    let obs_train = integrate(&train)?;
    let clim = monthly_climatology(&obs_train)?;
    let f_train = clim.anomaly(&obs_train);
    let f_test = clim.anomaly(&integrate(&test)?);
    let e_train = embed(&train, q)?.with_velocities()?;
    let e_test = embed(&test, q)?.with_velocities()?;
    let f: Vec<f64> = e_train.timestamps().iter().map(|&t| f_train.at(t).expect("aligned")).collect();
    let x0: Vec<f64> = e_test.timestamps().iter().map(|&t| f_test.at(t).expect("aligned")).collect();
    let lp = lp_fit(&f, &e_train, &nlsa_spec(&e_train, factor), None, 12)?;
    let leads: Vec<i64> = (0..=max_lead).collect();
    let truth = objective_truth(&x0, &leads, 1)?;
    let keaf = skill_curves(&run_forecasts(Forecaster::Lp(&lp), &e_test, &leads, None)?, &truth)?;
    let pers = skill_curves(&run_forecasts(Forecaster::Persistence(&x0), &e_test, &leads, None)?, &truth)?;
    Ok(SkillComparison {
        keaf_horizon: keaf.horizon_lead(DEFAULT_PC_THRESHOLD),
        persistence_horizon: pers.horizon_lead(DEFAULT_PC_THRESHOLD),
        leads,
        keaf_pc: keaf.pc,
        persistence_pc: pers.pc,
        keaf_rmse: keaf.rmse,
        persistence_rmse: pers.rmse,
    })
}

#[derive(Debug, Serialize)]
pub struct ClusterFit {
    pub series: Vec<f64>,
    pub true_states: Vec<usize>,
    pub fitted_states: Vec<usize>,
    pub coefficients: Vec<[f64; 3]>,
    pub switches: usize,
    pub accuracy: f64,
    pub aic: f64,
}

/// Two-regime AR(1) series and its cluster fit with switch budget `c`.
pub fn cluster_fit(n: usize, c: usize, seed: u64) -> Result<ClusterFit> {
    let spec = RegimeArSpec {
        states: vec![
            RegimeCoefficients {
                mu: 0.5,
                a: 0.8,
                sigma: 0.3,
            },
            RegimeCoefficients {
                mu: -0.5,
                a: 0.8,
                sigma: 0.3,
            },
        ],
        transition: vec![vec![0.99, 0.01], vec![0.01, 0.99]],
        n,
        x0: 0.0,
        initial_state: 0,
        seed,
    };
    let (x, states) = synth_regime_ar(&spec)?;
    let m = fit_cluster_ar(x.values(), 2, c, seed)?;
    // Transition t is labelled by the state generating x(t+1).
    let truth = &states[1..];
    let agree = m.gamma.iter().zip(truth).filter(|(a, b)| a == b).count();
    let acc = agree as f64 / truth.len() as f64;
    let flip = acc < 0.5;
    Ok(ClusterFit {
        series: x.values().to_vec(),
        true_states: truth.to_vec(),
        fitted_states: if flip { m.gamma.iter().map(|g| 1 - g).collect() } else { m.gamma.clone() },
        coefficients: m.coefficients.iter().map(|c| [c.mu, c.a, c.sigma]).collect(),
        switches: count_switches(&m.gamma),
        accuracy: acc.max(1.0 - acc),
        aic: m.aic,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| Error::Format(e.to_string())))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = decompose)]
pub fn decompose_js(n: usize, q: usize, count: usize, factor: f64, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(decomposition(n, q, count, factor, seed))
}

#[wasm_bindgen(js_name = forecastSkill)]
pub fn forecast_skill_js(
    n_train: usize,
    q: usize,
    max_lead: u32,
    factor: f64,
    seed: u64,
) -> std::result::Result<String, JsValue> {
    to_js(skill_comparison(n_train, q, max_lead as i64, factor, seed))
}

#[wasm_bindgen(js_name = clusterFit)]
pub fn cluster_fit_js(n: usize, c: usize, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(cluster_fit(n, c, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_finds_structure() {
        let d = decomposition(360, 12, 8, 0.5, 1).unwrap();
        assert_eq!(d.modes.len(), 8);
        assert!(d.modes[0].lambda.abs() < 1e-10);
        assert!(d.modes.iter().any(|m| m.class == "periodic"));
    }

    #[test]
    fn keaf_beats_persistence() {
        let s = skill_comparison(480, 12, 12, 0.25, 2).unwrap();
        let h = |v: Option<i64>| v.unwrap_or(i64::MAX);
        assert!(h(s.keaf_horizon) > h(s.persistence_horizon));
    }

    #[test]
    fn cluster_fit_recovers_regimes() {
        let f = cluster_fit(3000, 40, 3).unwrap();
        assert!(f.accuracy > 0.8, "{}", f.accuracy);
        assert!(f.switches <= 40);
        assert!(serde_json::to_string(&f).is_ok());
    }
}

//! Parametric baselines for scalar observables.
//!
//! * Stationary AR(1) `x(t+1) = mu + a x(t) + sigma e(t)` by least squares.
//! * Cluster AR: `K` sets of AR(1) coefficients and a hard affiliation
//!   sequence with at most `C` switches. Fitting alternates per-cluster least
//!   squares with an exact dynamic program over affiliations. This is a
//!   simplified stand-in for finite-element regularized clustering: same
//!   parameters and interface, hard instead of fuzzy affiliations.
//! * Markov transition estimates and two ways of propagating affiliations
//!   into the forecast period.
//!
//! Affiliations are zero-based in memory and one-based in model files.
//! `gamma[t]` labels the transition `x(t) -> x(t+1)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{check_row_stochastic, sample_categorical};
use crate::error::{Error, Result};
use crate::forecast::{lead_shifts, ForecastRun};
use crate::metrics::{skill_curves, SkillCurves, Truth, TruthMode};
use crate::par::map_indexed;
use crate::rng::substream;

pub const DEFAULT_RESTARTS: usize = 10;
const MAX_ITERATIONS: usize = 200;
/// Clusters with fewer transitions than this count as empty.
const MIN_CLUSTER_TRANSITIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub mu: f64,
    pub a: f64,
    pub sigma: f64,
}

impl ArModel {
    pub fn step(&self, x: f64) -> f64 {
        self.mu + self.a * x
    }
}

/// Least squares over the given transitions; `sigma` is the root mean square
/// residual.
fn fit_transitions(x: &[f64], ts: &[usize]) -> ArModel {
    let m = ts.len() as f64;
    let xm = ts.iter().map(|&t| x[t]).sum::<f64>() / m;
    let ym = ts.iter().map(|&t| x[t + 1]).sum::<f64>() / m;
    let sxx: f64 = ts.iter().map(|&t| (x[t] - xm).powi(2)).sum();
    let sxy: f64 = ts.iter().map(|&t| (x[t] - xm) * (x[t + 1] - ym)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let mu = ym - a * xm;
    let ssr: f64 = ts.iter().map(|&t| (x[t + 1] - mu - a * x[t]).powi(2)).sum();
    ArModel {
        mu,
        a,
        sigma: (ssr / m).sqrt(),
    }
}

pub fn fit_stationary_ar(x: &[f64]) -> Result<ArModel> {
    if x.len() < 3 {
        return Err(Error::InvalidArgument("autoregression needs at least 3 samples".into()));
    }
    let lagged = &x[..x.len() - 1];
    if lagged.iter().all(|v| *v == lagged[0]) {
        return Err(Error::Degenerate("constant series".into()));
    }
    let ts: Vec<usize> = (0..x.len() - 1).collect();
    Ok(fit_transitions(x, &ts))
}

/// Gaussian log-likelihood of residuals with maximum-likelihood variance.
fn gaussian_log_likelihood(m: usize, sigma: f64, floor: f64) -> f64 {
    let s2 = sigma.max(floor).powi(2);
    -(m as f64) / 2.0 * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0)
}

fn sigma_floor(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    1e-12 * sd.max(f64::MIN_POSITIVE)
}

/// Stationary fit with its log-likelihood and AIC (`p = 3`).
pub fn stationary_aic(x: &[f64]) -> Result<(ArModel, f64, f64)> {
    let m = fit_stationary_ar(x)?;
    let ll = gaussian_log_likelihood(x.len() - 1, m.sigma, sigma_floor(x));
    Ok((m, ll, 2.0 * 3.0 - 2.0 * ll))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterArModel {
    pub k: usize,
    pub c: usize,
    pub coefficients: Vec<ArModel>,
    /// Zero-based cluster of each transition, length `N - 1`.
    pub gamma: Vec<usize>,
    pub transition: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub aic: f64,
    /// Total squared residual after each affiliation update.
    pub objective_history: Vec<f64>,
    pub restarts: usize,
}

impl ClusterArModel {
    pub fn switches(&self) -> usize {
        count_switches(&self.gamma)
    }

    pub fn parameter_count(&self) -> usize {
        3 * self.k + self.switches()
    }
}

pub fn count_switches(gamma: &[usize]) -> usize {
    gamma.windows(2).filter(|w| w[0] != w[1]).count()
}

fn residual2(x: &[f64], t: usize, m: &ArModel) -> f64 {
    (x[t + 1] - m.mu - m.a * x[t]).powi(2)
}

fn objective(x: &[f64], gamma: &[usize], coef: &[ArModel]) -> f64 {
    gamma.iter().enumerate().map(|(t, &k)| residual2(x, t, &coef[k])).sum()
}

fn fit_clusters(x: &[f64], gamma: &[usize], k: usize) -> Option<Vec<ArModel>> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (t, &g) in gamma.iter().enumerate() {
        groups[g].push(t);
    }
    if groups.iter().any(|g| g.len() < MIN_CLUSTER_TRANSITIONS) {
        return None;
    }
    Some(groups.iter().map(|g| fit_transitions(x, g)).collect())
}

/// Least-squares coefficients of each cluster under a fixed affiliation.
pub fn refit_coefficients(x: &[f64], gamma: &[usize], k: usize) -> Result<Vec<ArModel>> {
    if gamma.len() + 1 != x.len() {
        return Err(Error::Shape(format!("{} labels for {} samples", gamma.len(), x.len())));
    }
    if gamma.iter().any(|&g| g >= k) {
        return Err(Error::InvalidArgument(format!("labels must lie in 0..{k}")));
    }
    fit_clusters(x, gamma, k).ok_or(Error::EmptyCluster(0))
}

/// Affiliations minimizing the total squared residual with at most `c`
/// switches. Ties prefer staying in the current cluster, then lower indices.
fn assign(x: &[f64], coef: &[ArModel], c: usize) -> Vec<usize> {
    let k = coef.len();
    let m = x.len() - 1;
    let width = c + 1;
    let idx = |kk: usize, cc: usize| kk * width + cc;
    let mut cost = vec![f64::INFINITY; k * width];
    // back[t][state] = previous cluster.
    let mut back = vec![0u16; m * k * width];
    for kk in 0..k {
        cost[idx(kk, 0)] = residual2(x, 0, &coef[kk]);
        back[idx(kk, 0)] = kk as u16;
    }
    let mut next = vec![f64::INFINITY; k * width];
    for t in 1..m {
        let e: Vec<f64> = coef.iter().map(|cf| residual2(x, t, cf)).collect();
        for kk in 0..k {
            for cc in 0..width {
                let mut best = cost[idx(kk, cc)];
                let mut from = kk;
                if cc > 0 {
                    for pk in 0..k {
                        if pk != kk && cost[idx(pk, cc - 1)] < best {
                            best = cost[idx(pk, cc - 1)];
                            from = pk;
                        }
                    }
                }
                next[idx(kk, cc)] = best + e[kk];
                back[t * k * width + idx(kk, cc)] = from as u16;
            }
        }
        std::mem::swap(&mut cost, &mut next);
    }
    let mut best = (f64::INFINITY, 0, 0);
    for cc in 0..width {
        for kk in 0..k {
            if cost[idx(kk, cc)] < best.0 {
                best = (cost[idx(kk, cc)], kk, cc);
            }
        }
    }
    let (_, mut kk, mut cc) = best;
    let mut gamma = vec![0; m];
    for t in (0..m).rev() {
        gamma[t] = kk;
        if t > 0 {
            let from = back[t * k * width + idx(kk, cc)] as usize;
            if from != kk {
                cc -= 1;
            }
            kk = from;
        }
    }
    gamma
}

/// Quantile split of smoothed residuals of the global fit.
fn initial_gamma(x: &[f64], k: usize, c: usize) -> Vec<usize> {
    let m = x.len() - 1;
    let global = fit_transitions(x, &(0..m).collect::<Vec<_>>());
    let r: Vec<f64> = (0..m).map(|t| x[t + 1] - global.step(x[t])).collect();
    let half = (m / (4 * (c + 1))).max(1);
    let mut prefix = vec![0.0; m + 1];
    for t in 0..m {
        prefix[t + 1] = prefix[t] + r[t];
    }
    let smooth: Vec<f64> = (0..m)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(m);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| smooth[a].total_cmp(&smooth[b]).then(a.cmp(&b)));
    let mut gamma = vec![0; m];
    for (rank, &t) in order.iter().enumerate() {
        gamma[t] = rank * k / m;
    }
    gamma
}

/// Random segmentation with `c` cuts, labels cycling from a random offset.
fn random_gamma<R: Rng>(rng: &mut R, m: usize, k: usize, c: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..c).map(|_| rng.random_range(1..m)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let offset = rng.random_range(0..k);
    let mut gamma = vec![0; m];
    let mut seg = 0;
    for (t, g) in gamma.iter_mut().enumerate() {
        while seg < cuts.len() && t >= cuts[seg] {
            seg += 1;
        }
        *g = (seg + offset) % k;
    }
    gamma
}

fn descend(x: &[f64], mut gamma: Vec<usize>, k: usize, c: usize) -> Option<(Vec<ArModel>, Vec<usize>, Vec<f64>)> {
    let mut history = Vec::new();
    let mut coef = fit_clusters(x, &gamma, k)?;
    for _ in 0..MAX_ITERATIONS {
        let next = assign(x, &coef, c);
        let obj = objective(x, &next, &coef);
        history.push(obj);
        let stable = next == gamma;
        gamma = next;
        coef = fit_clusters(x, &gamma, k)?;
        if stable {
            break;
        }
    }
    Some((coef, gamma, history))
}

/// Fits `k` clusters with at most `c` switches. `seed` drives the perturbed
/// restarts used when a cluster empties.
pub fn fit_cluster_ar(x: &[f64], k: usize, c: usize, seed: u64) -> Result<ClusterArModel> {
    let n = x.len();
    if k == 0 {
        return Err(Error::InvalidArgument("at least one cluster is required".into()));
    }
    if n < 10 * k || n < 3 {
        return Err(Error::InvalidArgument(format!("{n} samples are too few for {k} clusters")));
    }
    if k > 1 && c < k - 1 {
        return Err(Error::InvalidArgument(format!(
            "{k} clusters need at least {} switches, budget is {c}",
            k - 1
        )));
    }
    if k > u16::MAX as usize {
        return Err(Error::InvalidArgument("too many clusters".into()));
    }
    let m = n - 1;
    let floor = sigma_floor(x);
    if k == 1 {
        let model = fit_stationary_ar(x)?;
        let gamma = vec![0; m];
        let ll = gaussian_log_likelihood(m, model.sigma, floor);
        return Ok(ClusterArModel {
            k,
            c,
            coefficients: vec![model],
            objective_history: vec![objective(x, &gamma, &[model])],
            transition: vec![vec![1.0]],
            gamma,
            log_likelihood: ll,
            aic: 6.0 - 2.0 * ll,
            restarts: 0,
        });
    }
    let mut rng = substream(seed, "cluster-ar-restarts");
    let mut attempt = descend(x, initial_gamma(x, k, c), k, c);
    let mut restarts = 0;
    while attempt.is_none() {
        if restarts == DEFAULT_RESTARTS {
            return Err(Error::EmptyCluster(restarts));
        }
        restarts += 1;
        attempt = descend(x, random_gamma(&mut rng, m, k, c), k, c);
    }
    let (coefficients, gamma, objective_history) = attempt.expect("loop exits with a fit");
    let transition = estimate_transition_matrix(&gamma, k)?;
    let mut counts = vec![0usize; k];
    for &g in &gamma {
        counts[g] += 1;
    }
    let ll: f64 = coefficients
        .iter()
        .zip(&counts)
        .map(|(cf, &mk)| gaussian_log_likelihood(mk, cf.sigma, floor))
        .sum();
    let p = 3 * k + count_switches(&gamma);
    Ok(ClusterArModel {
        k,
        c,
        coefficients,
        gamma,
        transition,
        log_likelihood: ll,
        aic: 2.0 * p as f64 - 2.0 * ll,
        objective_history,
        restarts,
    })
}

/// `T_ij = N_ij / sum_k N_ik` from direct transitions in `gamma`.
pub fn estimate_transition_matrix(gamma: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    if let Some(&g) = gamma.iter().find(|&&g| g >= k) {
        return Err(Error::InvalidArgument(format!("state {g} outside 0..{k}")));
    }
    let mut counts = vec![vec![0usize; k]; k];
    for w in gamma.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                return Err(Error::NoOutgoingTransition(i));
            }
            Ok(row.iter().map(|&v| v as f64 / total as f64).collect())
        })
        .collect()
}

fn advance(pi: &[f64], t: &[Vec<f64>]) -> Vec<f64> {
    let k = pi.len();
    (0..k).map(|j| (0..k).map(|i| pi[i] * t[i][j]).sum()).collect()
}

fn check_probability(pi: &[f64]) -> Result<()> {
    let s: f64 = pi.iter().sum();
    if pi.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{pi:?} is not a probability vector")));
    }
    Ok(())
}

/// `pi(tau) = pi0 T^tau`.
pub fn predict_affiliation_deterministic(pi0: &[f64], t: &[Vec<f64>], tau: usize) -> Result<Vec<f64>> {
    Ok(affiliation_path(pi0, t, tau)?.pop().expect("path includes pi0"))
}

/// `pi(0), ..., pi(tau)`.
pub fn affiliation_path(pi0: &[f64], t: &[Vec<f64>], tau: usize) -> Result<Vec<Vec<f64>>> {
    check_row_stochastic(t, pi0.len())?;
    check_probability(pi0)?;
    let mut out = vec![pi0.to_vec()];
    for _ in 0..tau {
        let next = advance(out.last().expect("non-empty"), t);
        out.push(next);
    }
    Ok(out)
}

/// One realization `Gamma_R(0..=tau_max)` of the switching process, the first
/// state drawn from `pi0`.
pub fn predict_affiliation_realization<R: Rng>(
    pi0: &[f64],
    t: &[Vec<f64>],
    tau_max: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_row_stochastic(t, pi0.len())?;
    check_probability(pi0)?;
    let mut state = sample_categorical(rng, pi0);
    let mut out = vec![state];
    for _ in 0..tau_max {
        state = sample_categorical(rng, &t[state]);
        out.push(state);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Noise {
    Off,
    Seeded(u64),
}

/// `x(0) = x0`, `x(s+1) = mu + a x(s) [+ sigma e]` for `s < tau`.
pub fn ar_forecast(model: &ArModel, x0: f64, tau: usize, noise: Noise) -> Vec<f64> {
    let mut rng = match noise {
        Noise::Off => None,
        Noise::Seeded(seed) => Some(substream(seed, "ar-noise")),
    };
    let mut out = Vec::with_capacity(tau + 1);
    let mut x = x0;
    out.push(x);
    for _ in 0..tau {
        x = model.step(x);
        if let Some(r) = rng.as_mut() {
            let e: f64 = r.sample(StandardNormal);
            x += model.sigma * e;
        }
        out.push(x);
    }
    out
}

/// How deterministic affiliation probabilities enter the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendMode {
    /// Step with `sum_k pi_k (mu_k, a_k)`.
    #[default]
    Coefficients,
    /// Run one trajectory per cluster and average them with `pi(s)`.
    Trajectories,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffiliationScheme {
    Deterministic(BlendMode),
    Realization(u64),
}

/// Cluster whose one-step prediction of `x0` from `x_prev` is closest; without
/// a predecessor, the cluster with the closest stationary mean.
pub fn initial_cluster(model: &ClusterArModel, x_prev: Option<f64>, x0: f64) -> usize {
    let score = |cf: &ArModel| match x_prev {
        Some(p) => (x0 - cf.step(p)).abs(),
        None if cf.a != 1.0 => (x0 - cf.mu / (1.0 - cf.a)).abs(),
        None => f64::INFINITY,
    };
    (0..model.k).fold(0, |best, kk| {
        if score(&model.coefficients[kk]) < score(&model.coefficients[best]) {
            kk
        } else {
            best
        }
    })
}

/// Noise-free trajectory of length `tau + 1` under predicted affiliations.
/// `index` seeds the realization substream.
pub fn cluster_forecast(
    model: &ClusterArModel,
    x_prev: Option<f64>,
    x0: f64,
    tau: usize,
    scheme: AffiliationScheme,
    index: usize,
) -> Result<Vec<f64>> {
    let k0 = initial_cluster(model, x_prev, x0);
    let mut pi0 = vec![0.0; model.k];
    pi0[k0] = 1.0;
    match scheme {
        AffiliationScheme::Deterministic(blend) => {
            let path = affiliation_path(&pi0, &model.transition, tau)?;
            match blend {
                BlendMode::Coefficients => {
                    let mut out = vec![x0];
                    let mut x = x0;
                    for pi in path.iter().skip(1) {
                        let mu: f64 = pi.iter().zip(&model.coefficients).map(|(p, c)| p * c.mu).sum();
                        let a: f64 = pi.iter().zip(&model.coefficients).map(|(p, c)| p * c.a).sum();
                        x = mu + a * x;
                        out.push(x);
                    }
                    Ok(out)
                }
                BlendMode::Trajectories => {
                    let per: Vec<Vec<f64>> = model
                        .coefficients
                        .iter()
                        .map(|c| ar_forecast(c, x0, tau, Noise::Off))
                        .collect();
                    Ok((0..=tau)
                        .map(|s| (0..model.k).map(|kk| path[s][kk] * per[kk][s]).sum())
                        .collect())
                }
            }
        }
        AffiliationScheme::Realization(seed) => {
            let mut rng = substream(seed, &format!("realization-{index}"));
            let gamma = predict_affiliation_realization(&pi0, &model.transition, tau, &mut rng)?;
            Ok(known_affiliation_forecast(model, x0, &gamma[1..]))
        }
    }
}

/// Trajectory stepping with the given affiliation of each transition.
pub fn known_affiliation_forecast(model: &ClusterArModel, x0: f64, gamma: &[usize]) -> Vec<f64> {
    let mut out = vec![x0];
    let mut x = x0;
    for &g in gamma {
        x = model.coefficients[g].step(x);
        out.push(x);
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub enum BaselineForecaster<'a> {
    Stationary(&'a ArModel),
    Cluster(&'a ClusterArModel, AffiliationScheme),
}

impl BaselineForecaster<'_> {
    pub fn label(&self) -> String {
        match self {
            BaselineForecaster::Stationary(_) => "ar".into(),
            BaselineForecaster::Cluster(m, AffiliationScheme::Deterministic(_)) => {
                format!("cluster-ar-k{}-c{}-pi", m.k, m.c)
            }
            BaselineForecaster::Cluster(m, AffiliationScheme::Realization(_)) => {
                format!("cluster-ar-k{}-c{}-realization", m.k, m.c)
            }
        }
    }
}

/// Forecasts from each of `inits` (indices into `x`) at every lead.
pub fn baseline_run(
    forecaster: BaselineForecaster,
    x: &[f64],
    timestamps: &[i64],
    inits: &[usize],
    leads: &[i64],
    dt: i64,
) -> Result<ForecastRun> {
    let shifts = lead_shifts(leads, dt)?;
    let tau = shifts.iter().copied().max().unwrap_or(0);
    if x.len() != timestamps.len() {
        return Err(Error::Shape("series and timestamps differ in length".into()));
    }
    if let Some(&bad) = inits.iter().find(|&&j| j >= x.len()) {
        return Err(Error::InvalidArgument(format!("initial index {bad} outside the series")));
    }
    let rows = map_indexed(inits.len(), |r| -> Result<Vec<f64>> {
        let j = inits[r];
        let prev = j.checked_sub(1).map(|p| x[p]);
        let traj = match forecaster {
            BaselineForecaster::Stationary(m) => ar_forecast(m, x[j], tau, Noise::Off),
            BaselineForecaster::Cluster(m, scheme) => cluster_forecast(m, prev, x[j], tau, scheme, j)?,
        };
        Ok(shifts.iter().map(|&s| traj[s]).collect())
    });
    let mut predictions = Array2::zeros((inits.len(), shifts.len()));
    for (r, row) in rows.into_iter().enumerate() {
        for (c, v) in row?.into_iter().enumerate() {
            predictions[[r, c]] = v;
        }
    }
    Ok(ForecastRun {
        method: forecaster.label(),
        leads: leads.to_vec(),
        predictions,
        init_timestamps: inits.iter().map(|&j| timestamps[j]).collect(),
        l_trunc: None,
        tolerance: None,
        n_n: None,
        excluded: Vec::new(),
    })
}

/// Skill over the training record when the fitted affiliation sequence is
/// known at every step.
pub fn potential_predictability(model: &ClusterArModel, x: &[f64], leads: &[i64], dt: i64) -> Result<SkillCurves> {
    if x.len() != model.gamma.len() + 1 {
        return Err(Error::Shape(format!(
            "series of {} samples for an affiliation of {} transitions",
            x.len(),
            model.gamma.len()
        )));
    }
    let shifts = lead_shifts(leads, dt)?;
    let n = x.len();
    let inits: Vec<usize> = (1..n).collect();
    let mut predictions = Array2::zeros((inits.len(), shifts.len()));
    for (r, &j) in inits.iter().enumerate() {
        for (c, &s) in shifts.iter().enumerate() {
            let end = (j + s).min(n - 1);
            let traj = known_affiliation_forecast(model, x[j], &model.gamma[j..end]);
            predictions[[r, c]] = *traj.last().expect("trajectory starts at x0");
        }
    }
    let run = ForecastRun {
        method: format!("cluster-ar-k{}-c{}-potential", model.k, model.c),
        leads: leads.to_vec(),
        predictions,
        init_timestamps: inits.iter().map(|&j| j as i64).collect(),
        l_trunc: None,
        tolerance: None,
        n_n: None,
        excluded: Vec::new(),
    };
    let truth = Truth::from_series(&x[1..], leads, dt, TruthMode::Objective)?;
    skill_curves(&run, &truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AicRow {
    pub k: usize,
    pub c: usize,
    pub switches: Option<usize>,
    pub log_likelihood: Option<f64>,
    pub aic: Option<f64>,
    /// Why the cell has no score.
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AicTable {
    pub rows: Vec<AicRow>,
    pub best: (usize, usize),
}

/// Scores every `(K, C)` cell; cells with `K >= 2` and too small a switch
/// budget, and failed fits, are recorded without a score.
pub fn aic_select(x: &[f64], ks: &[usize], cs: &[usize], seed: u64) -> Result<AicTable> {
    if ks.is_empty() || cs.is_empty() {
        return Err(Error::InvalidArgument("empty K or C range".into()));
    }
    let cells: Vec<(usize, usize)> = ks.iter().flat_map(|&k| cs.iter().map(move |&c| (k, c))).collect();
    let rows = map_indexed(cells.len(), |i| {
        let (k, c) = cells[i];
        if k > 1 && c + 1 < k {
            return AicRow {
                k,
                c,
                switches: None,
                log_likelihood: None,
                aic: None,
                note: "switch budget below K - 1".into(),
            };
        }
        match fit_cluster_ar(x, k, c, seed) {
            Ok(m) => AicRow {
                k,
                c,
                switches: Some(m.switches()),
                log_likelihood: Some(m.log_likelihood),
                aic: Some(m.aic),
                note: String::new(),
            },
            Err(e) => AicRow {
                k,
                c,
                switches: None,
                log_likelihood: None,
                aic: None,
                note: e.to_string(),
            },
        }
    });
    let best = rows
        .iter()
        .filter_map(|r| r.aic.map(|a| (a, r.k, r.c)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k, c)| (k, c))
        .ok_or_else(|| Error::Degenerate("no (K, C) cell could be fitted".into()))?;
    Ok(AicTable { rows, best })
}

pub fn write_aic_csv(path: &Path, table: &AicTable, header_comment: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let res = (|| -> std::io::Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "k,c,switches,log_likelihood,aic,selected,note")?;
        for r in &table.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.k,
                r.c,
                r.switches.map(|s| s.to_string()).unwrap_or_default(),
                opt(r.log_likelihood),
                opt(r.aic),
                (r.k, r.c) == table.best,
                r.note.replace(',', ";")
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// `(value, count)` runs of a one-based affiliation sequence, e.g. `1x40 2x7`.
fn run_length(gamma: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < gamma.len() {
        let j = (i..gamma.len()).find(|&j| gamma[j] != gamma[i]).unwrap_or(gamma.len());
        parts.push(format!("{}x{}", gamma[i] + 1, j - i));
        i = j;
    }
    parts.join(" ")
}

/// Plain `key = value` model file.
pub fn write_cluster_model(path: &Path, m: &ClusterArModel, header_comment: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "k = {}", m.k)?;
        writeln!(w, "c = {}", m.c)?;
        for (i, cf) in m.coefficients.iter().enumerate() {
            writeln!(w, "cluster.{} = {} {} {}", i + 1, cf.mu, cf.a, cf.sigma)?;
        }
        for (i, row) in m.transition.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "transition.{} = {}", i + 1, cells.join(" "))?;
        }
        writeln!(w, "log_likelihood = {}", m.log_likelihood)?;
        writeln!(w, "aic = {}", m.aic)?;
        writeln!(w, "restarts = {}", m.restarts)?;
        writeln!(w, "gamma = {}", run_length(&m.gamma))?;
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_cluster_model(path: &Path) -> Result<ClusterArModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected `key = value`, got `{line}`")))?;
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| kv.get(key).ok_or_else(|| Error::Format(format!("missing key `{key}`")));
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
    let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer `{s}`")));
    let k = int(get("k")?)?;
    let c = int(get("c")?)?;
    let mut coefficients = Vec::with_capacity(k);
    let mut transition = Vec::with_capacity(k);
    for i in 1..=k {
        let v = get(&format!("cluster.{i}"))?
            .split_whitespace()
            .map(num)
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != 3 {
            return Err(Error::Format(format!("cluster.{i} needs mu a sigma")));
        }
        coefficients.push(ArModel {
            mu: v[0],
            a: v[1],
            sigma: v[2],
        });
        transition.push(
            get(&format!("transition.{i}"))?
                .split_whitespace()
                .map(num)
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    check_row_stochastic(&transition, k)?;
    let mut gamma = Vec::new();
    for run in get("gamma")?.split_whitespace() {
        let (v, n) = run
            .split_once('x')
            .ok_or_else(|| Error::Format(format!("bad run `{run}`")))?;
        let v = int(v)?;
        if v == 0 || v > k {
            return Err(Error::Format(format!("cluster {v} outside 1..={k}")));
        }
        gamma.extend(std::iter::repeat_n(v - 1, int(n)?));
    }
    Ok(ClusterArModel {
        k,
        c,
        coefficients,
        gamma,
        transition,
        log_likelihood: num(get("log_likelihood")?)?,
        aic: num(get("aic")?)?,
        objective_history: Vec::new(),
        restarts: int(get("restarts")?)?,
    })
}

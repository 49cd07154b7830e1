//! Diffusion-maps normalization, the Markov operator `P = D^-1 K~`, the graph
//! Laplacian `L = I - P` and its leading eigenfunctions.
//!
//! The eigenproblem is solved on the symmetric conjugate
//! `S = D^-1/2 K~ D^-1/2`; eigenvectors `v` of `S` map back to
//! eigenfunctions `phi = D^-1/2 v` of `L` with `lambda = 1 - mu`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::kernels::KernelMatrix;

/// Inner product in which eigenfunctions are orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerProduct {
    /// `sum_k D_k phi_ki phi_kj` with the raw degree vector.
    #[default]
    Degree,
    /// Same with `D / sum(D)`, a probability measure on the samples.
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    /// Ascending, `eigenvalues[0]` is the trivial zero.
    pub eigenvalues: Array1<f64>,
    /// `n x l`, one eigenfunction per column.
    pub eigenfunctions: Array2<f64>,
    pub degree: Array1<f64>,
    pub q: Array1<f64>,
    pub alpha: f64,
    pub inner_product: InnerProduct,
    pub kernel_hash: [u8; 32],
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.eigenfunctions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Weights of the inner product.
    pub fn weights(&self) -> Array1<f64> {
        match self.inner_product {
            InnerProduct::Degree => self.degree.clone(),
            InnerProduct::Probability => &self.degree / self.degree.sum(),
        }
    }

    /// `<phi_j, f>` for every column, using the basis inner product.
    pub fn project(&self, f: &[f64]) -> Result<Array1<f64>> {
        if f.len() != self.len() {
            return Err(Error::Shape(format!("observable has {} samples, basis {}", f.len(), self.len())));
        }
        let wf: Array1<f64> = self.weights().iter().zip(f).map(|(w, v)| w * v).collect();
        Ok(self.eigenfunctions.t().dot(&wf))
    }

    /// Gram matrix of the eigenfunctions under the basis inner product.
    pub fn gram(&self) -> Array2<f64> {
        let w = self.weights().insert_axis(Axis(1));
        let wphi = &self.eigenfunctions * &w;
        self.eigenfunctions.t().dot(&wphi)
    }
}

/// `K~_ij = K_ij / (Q_i^a Q_j^a)` with `Q_i = sum_j K_ij`.
pub fn normalize(k: &Array2<f64>, alpha: f64) -> (Array2<f64>, Array1<f64>) {
    let q = k.sum_axis(Axis(1));
    if alpha == 0.0 {
        return (k.clone(), q);
    }
    let qa = q.mapv(|v| v.powf(alpha));
    let mut out = k.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v /= qa[i] * qa[j];
    }
    (out, q)
}

/// Returns `(P, L, D)`.
pub fn markov_and_laplacian(ktilde: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
    let d = ktilde.sum_axis(Axis(1));
    if let Some(i) = d.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::ZeroRow(i));
    }
    let p = ktilde / &d.view().insert_axis(Axis(1));
    let mut l = -&p;
    l.diag_mut().mapv_inplace(|v| v + 1.0);
    Ok((p, l, d))
}

fn max_abs_entry_index(col: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0usize, 0.0f64);
    for (i, v) in col.enumerate() {
        if v.abs() > best.1.abs() {
            best = (i, v);
        }
    }
    best
}

/// Eigenpairs of `L` with the `count` smallest eigenvalues.
///
/// `L` and `D` must come from [`markov_and_laplacian`]; the symmetric
/// conjugate is rebuilt as `D^1/2 (I - L) D^-1/2`.
pub fn eigs(l: &Array2<f64>, d: &Array1<f64>, count: usize, inner_product: InnerProduct) -> Result<EigenBasis> {
    let n = l.nrows();
    if l.ncols() != n || d.len() != n {
        return Err(Error::Shape(format!("laplacian {:?} with degree of length {}", l.dim(), d.len())));
    }
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!("requested {count} eigenpairs of a {n}-sample basis")));
    }
    let sd = d.mapv(f64::sqrt);
    let s = DMatrix::from_fn(n, n, |i, j| {
        let pij = if i == j { 1.0 - l[[i, j]] } else { -l[[i, j]] };
        let pji = if i == j { 1.0 - l[[j, i]] } else { -l[[j, i]] };
        // (D^1/2 P D^-1/2)_ij = sqrt(D_i) P_ij / sqrt(D_j); averaging with the
        // transpose removes rounding asymmetry.
        0.5 * (sd[i] * pij / sd[j] + sd[j] * pji / sd[i])
    });
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let weights = match inner_product {
        InnerProduct::Degree => d.clone(),
        InnerProduct::Probability => d / d.sum(),
    };
    let mut lambda = Array1::zeros(count);
    let mut phi = Array2::zeros((n, count));
    for (c, &idx) in order.iter().take(count).enumerate() {
        lambda[c] = 1.0 - eig.eigenvalues[idx];
        let v = eig.eigenvectors.column(idx);
        for k in 0..n {
            phi[[k, c]] = v[k] / sd[k];
        }
    }
    if count >= 1 {
        // The top eigenvector of S is D^1/2 up to rounding; write the constant
        // function exactly.
        phi.column_mut(0).fill(1.0 / weights.sum().sqrt());
        lambda[0] = lambda[0].max(0.0);
    }
    // Modified Gram-Schmidt in the weighted inner product.
    for c in 0..count {
        for prev in 0..c {
            let dot: f64 = (0..n).map(|k| weights[k] * phi[[k, prev]] * phi[[k, c]]).sum();
            for k in 0..n {
                phi[[k, c]] -= dot * phi[[k, prev]];
            }
        }
        let norm: f64 = (0..n).map(|k| weights[k] * phi[[k, c]].powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::EigenSolver { residual: f64::NAN });
        }
        phi.column_mut(c).mapv_inplace(|v| v / norm);
        let (_, pivot) = max_abs_entry_index(phi.column(c).iter().copied());
        if pivot < 0.0 {
            phi.column_mut(c).mapv_inplace(|v| -v);
        }
    }

    let residual = max_residual(l, &phi, &lambda);
    let scale = phi.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if !(residual / scale < 1e-6) {
        return Err(Error::EigenSolver { residual });
    }
    Ok(EigenBasis {
        eigenvalues: lambda,
        eigenfunctions: phi,
        degree: d.clone(),
        q: d.clone(),
        alpha: 0.0,
        inner_product,
        kernel_hash: [0; 32],
    })
}

/// Largest Euclidean norm of `L phi_i - lambda_i phi_i` over the columns.
pub fn max_residual(l: &Array2<f64>, phi: &Array2<f64>, lambda: &Array1<f64>) -> f64 {
    let lphi = l.dot(phi);
    (0..phi.ncols())
        .map(|c| {
            lphi.column(c)
                .iter()
                .zip(phi.column(c))
                .map(|(a, b)| (a - lambda[c] * b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Normalizes a kernel, builds its Laplacian and returns `count` eigenpairs.
pub fn decompose(kernel: &KernelMatrix, count: usize, inner_product: InnerProduct) -> Result<EigenBasis> {
    let (ktilde, q) = normalize(&kernel.values, kernel.spec.alpha);
    let (_, l, d) = markov_and_laplacian(&ktilde)?;
    let mut basis = eigs(&l, &d, count, inner_product)?;
    basis.q = q;
    basis.alpha = kernel.spec.alpha;
    basis.kernel_hash = kernel.hash;
    Ok(basis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeClass {
    Periodic,
    LowFrequency,
    Intermittent,
    Other,
}

impl ModeClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModeClass::Periodic => "periodic",
            ModeClass::LowFrequency => "low-frequency",
            ModeClass::Intermittent => "intermittent",
            ModeClass::Other => "other",
        }
    }
}

/// Thresholds for [`mode_diagnostics`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeThresholds {
    /// Share of power near harmonics of the annual frequency.
    pub periodic_share: f64,
    /// Share of power below `1 / low_frequency_period`.
    pub low_frequency_share: f64,
    pub low_frequency_period: f64,
    /// Autocorrelation must stay positive up to this lag (months).
    pub positive_acf_months: f64,
    /// Minimum half-power bandwidth of the smoothed spectral peak, in bins.
    pub intermittent_bins: usize,
}

impl Default for ModeThresholds {
    fn default() -> Self {
        Self {
            periodic_share: 0.6,
            low_frequency_share: 0.6,
            low_frequency_period: 24.0,
            positive_acf_months: 12.0,
            intermittent_bins: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeDiagnostics {
    /// Frequencies in cycles per month, bins `1..=N/2`.
    pub frequencies: Vec<f64>,
    pub periodogram: Vec<f64>,
    /// Lags `0..N/2`.
    pub autocorrelation: Vec<f64>,
    pub class: ModeClass,
    /// Period (months) of the largest periodogram bin.
    pub dominant_period: f64,
}

pub fn mode_diagnostics(phi: &[f64], dt: f64) -> Result<ModeDiagnostics> {
    mode_diagnostics_with(phi, dt, &ModeThresholds::default())
}

pub fn mode_diagnostics_with(phi: &[f64], dt: f64, th: &ModeThresholds) -> Result<ModeDiagnostics> {
    let n = phi.len();
    if n < 48 {
        return Err(Error::InvalidArgument(format!("mode diagnostics need 48 samples, got {n}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("sampling step must be positive".into()));
    }
    let mean = phi.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = phi.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let frequencies: Vec<f64> = (1..=half).map(|k| k as f64 / (n as f64 * dt)).collect();
    let periodogram: Vec<f64> = (1..=half).map(|k| buf[k].norm_sqr() / n as f64).collect();
    let total: f64 = periodogram.iter().sum();

    let var = phi.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let autocorrelation: Vec<f64> = (0..half)
        .map(|lag| {
            if var == 0.0 {
                return if lag == 0 { 1.0 } else { 0.0 };
            }
            (0..n - lag).map(|t| (phi[t] - mean) * (phi[t + lag] - mean)).sum::<f64>() / var
        })
        .collect();

    let peak = (0..half).fold(0, |b, k| if periodogram[k] > periodogram[b] { k } else { b });
    let dominant_period = 1.0 / frequencies[peak];
    let df = 1.0 / (n as f64 * dt);

    let class = if total == 0.0 {
        ModeClass::Other
    } else {
        let near_annual: f64 = (0..half)
            .filter(|&k| {
                let f = frequencies[k];
                let m = (f * 12.0).round();
                m >= 1.0 && (f - m / 12.0).abs() <= df * 1.000_001
            })
            .map(|k| periodogram[k])
            .sum();
        let low: f64 = (0..half)
            .filter(|&k| frequencies[k] < 1.0 / th.low_frequency_period)
            .map(|k| periodogram[k])
            .sum();
        let acf_lags = (th.positive_acf_months / dt).ceil() as usize;
        let acf_positive = (1..=acf_lags.min(half - 1)).all(|lag| autocorrelation[lag] > 0.0);

        let smooth: Vec<f64> = (0..half)
            .map(|k| {
                let lo = k.saturating_sub(1);
                let hi = (k + 1).min(half - 1);
                periodogram[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        let speak = (0..half).fold(0, |b, k| if smooth[k] > smooth[b] { k } else { b });
        let halfp = 0.5 * smooth[speak];
        let mut lo = speak;
        while lo > 0 && smooth[lo - 1] >= halfp {
            lo -= 1;
        }
        let mut hi = speak;
        while hi + 1 < half && smooth[hi + 1] >= halfp {
            hi += 1;
        }
        let bandwidth = hi - lo + 1;

        if near_annual >= th.periodic_share * total {
            ModeClass::Periodic
        } else if low >= th.low_frequency_share * total && acf_positive {
            ModeClass::LowFrequency
        } else if bandwidth >= th.intermittent_bins && frequencies[speak] >= 1.0 / th.low_frequency_period {
            ModeClass::Intermittent
        } else {
            ModeClass::Other
        }
    };
    Ok(ModeDiagnostics {
        frequencies,
        periodogram,
        autocorrelation,
        class,
        dominant_period,
    })
}

const EIGB_MAGIC: &[u8; 4] = b"EIGB";
const EIGB_VERSION: u16 = 1;

/// Layout: magic, version, n, l, alpha, inner-product flag, kernel hash,
/// then `D`, `Q`, `lambda` and row-major `Phi`.
pub fn write_eigen_basis(path: &Path, b: &EigenBasis) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BinWriter::new(BufWriter::new(file));
    let res = (|| -> std::io::Result<()> {
        w.bytes(EIGB_MAGIC)?;
        w.u16(EIGB_VERSION)?;
        write_basis_body(&mut w, b)?;
        w.into_inner().flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub(crate) fn write_basis_body<W: Write>(w: &mut BinWriter<W>, b: &EigenBasis) -> std::io::Result<()> {
    w.u64(b.len() as u64)?;
    w.u64(b.count() as u64)?;
    w.f64(b.alpha)?;
    w.u8(match b.inner_product {
        InnerProduct::Degree => 0,
        InnerProduct::Probability => 1,
    })?;
    w.bytes(&b.kernel_hash)?;
    w.f64s(b.degree.iter())?;
    w.f64s(b.q.iter())?;
    w.f64s(b.eigenvalues.iter())?;
    w.f64s(b.eigenfunctions.iter())
}

pub fn read_eigen_basis(path: &Path) -> Result<EigenBasis> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(file));
    r.magic(EIGB_MAGIC)?;
    r.version(EIGB_VERSION)?;
    let b = read_basis_body(&mut r)?;
    r.expect_eof()?;
    Ok(b)
}

pub(crate) fn read_basis_body<R: Read>(r: &mut BinReader<R>) -> Result<EigenBasis> {
    let n = r.usize()?;
    let l = r.usize()?;
    let alpha = r.f64()?;
    let inner_product = match r.u8()? {
        0 => InnerProduct::Degree,
        1 => InnerProduct::Probability,
        other => return Err(Error::Format(format!("unknown inner-product flag {other}"))),
    };
    let kernel_hash = r.hash()?;
    let degree = Array1::from(r.f64_vec(n)?);
    let q = Array1::from(r.f64_vec(n)?);
    let eigenvalues = Array1::from(r.f64_vec(l)?);
    let eigenfunctions =
        Array2::from_shape_vec((n, l), r.f64_vec(n.saturating_mul(l))?).map_err(|e| Error::Format(e.to_string()))?;
    Ok(EigenBasis {
        eigenvalues,
        eigenfunctions,
        degree,
        q,
        alpha,
        inner_product,
        kernel_hash,
    })
}

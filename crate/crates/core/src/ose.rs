//! Out-of-sample extension of observables defined on training samples.
//!
//! Geometric harmonics expand `f` in the Laplacian eigenbasis and extend each
//! eigenfunction by the Nystrom formula
//! `phi_j(y) = (1 / lambda'_j) sum_k W(y, x_k) phi_j(x_k)` with
//! `lambda'_j = 1 - lambda_j`, the eigenvalue of the Markov operator.
//!
//! Laplacian pyramids smooth successive residuals with kernels of halving
//! bandwidth, `s_l = W_l d_l`, `d_0 = f`, `d_{l+1} = f - sum_{i<=l} s_i`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array1;

use crate::binio::{BinReader, BinWriter};
use crate::embedding::{EmbeddedPoint, EmbeddedSeries};
use crate::error::{Error, Result};
use crate::kernels::{self, exponent_row, kernel_hash, multiscale_family, KernelSpec};
use crate::laplacian::{read_basis_body, write_basis_body, EigenBasis};
use crate::par::map_indexed;

/// Smallest admissible Nystrom eigenvalue `1 - lambda`.
pub const EIGENVALUE_FLOOR: f64 = 1e-6;
/// Relative cutoff of the default truncation rule.
pub const TRUNCATION_RATIO: f64 = 1e-3;
pub const DEFAULT_MAX_LEVELS: usize = 12;
/// Default pyramid tolerance relative to `|f|`.
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-6;

/// Probability weights over training samples from `-log K` values, optionally
/// multiplied by per-sample factors. The row is shifted by its minimum before
/// exponentiating so narrow kernels keep their nearest sample.
pub fn weights_from_exponents(exponents: &[f64], factors: Option<&[f64]>) -> Result<Vec<f64>> {
    let min = exponents.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::NonFiniteKernel { row: 0, col: 0 });
    }
    let mut w: Vec<f64> = exponents.iter().map(|e| (min - e).exp()).collect();
    if let Some(f) = factors {
        for (wk, fk) in w.iter_mut().zip(f) {
            *wk *= fk;
        }
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::ZeroRow(0));
    }
    for v in &mut w {
        *v /= total;
    }
    Ok(w)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_observable(f: &[f64], train: &EmbeddedSeries) -> Result<()> {
    if f.len() != train.len() {
        return Err(Error::Shape(format!(
            "observable has {} samples, training embedding {}",
            f.len(),
            train.len()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("observable contains non-finite values".into()));
    }
    Ok(())
}

/// `1 - lambda_j`, the matching eigenvalue of the Markov operator.
pub fn nystrom_eigenvalue(basis: &EigenBasis, j: usize) -> f64 {
    1.0 - basis.eigenvalues[j]
}

/// Keeps eigenfunctions until the first `lambda'_l < 1e-3 lambda'_2`, or
/// until one drops below the conditioning floor.
pub fn default_truncation(basis: &EigenBasis) -> usize {
    let count = basis.count();
    if count < 2 {
        return count;
    }
    let reference = nystrom_eigenvalue(basis, 1);
    (0..count)
        .find(|&j| {
            let v = nystrom_eigenvalue(basis, j);
            v < TRUNCATION_RATIO * reference || v < EIGENVALUE_FLOOR
        })
        .unwrap_or(count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhModel {
    pub basis: EigenBasis,
    pub spec: KernelSpec,
    pub train: EmbeddedSeries,
    /// Training values of the observable.
    pub f: Vec<f64>,
    /// `<phi_j, f>` for `j < l_trunc`.
    pub coefficients: Array1<f64>,
    pub l_trunc: usize,
    /// `|f - sum_j <phi_j, f> phi_j|` over the training samples.
    pub residual: f64,
    /// `g_k = sum_j <phi_j, f> phi_j(x_k) / lambda'_j`; every GH extension and
    /// forecast is a weighted average of shifted `g`.
    lifted: Vec<f64>,
    /// `Q_k^-alpha`, absent when `alpha = 0`.
    q_factors: Option<Vec<f64>>,
}

pub fn gh_fit(
    f: &[f64],
    basis: &EigenBasis,
    train: &EmbeddedSeries,
    spec: &KernelSpec,
    l_trunc: Option<usize>,
) -> Result<GhModel> {
    check_observable(f, train)?;
    if basis.len() != train.len() {
        return Err(Error::Shape(format!("basis has {} samples, training {}", basis.len(), train.len())));
    }
    if basis.kernel_hash != kernel_hash(train, spec) {
        return Err(Error::HashMismatch("eigenbasis was not built from this embedding and kernel".into()));
    }
    let l_trunc = l_trunc.unwrap_or_else(|| default_truncation(basis));
    if l_trunc > basis.count() {
        return Err(Error::InvalidArgument(format!(
            "truncation {l_trunc} exceeds the {} available eigenfunctions",
            basis.count()
        )));
    }
    for j in 0..l_trunc {
        let v = nystrom_eigenvalue(basis, j);
        if v < EIGENVALUE_FLOOR {
            return Err(Error::IllConditioned {
                index: j,
                value: v,
                floor: EIGENVALUE_FLOOR,
            });
        }
    }
    let all = basis.project(f)?;
    let coefficients = all.slice(ndarray::s![..l_trunc]).to_owned();
    let n = train.len();
    let phi = &basis.eigenfunctions;
    let mut reconstruction = vec![0.0; n];
    let mut lifted = vec![0.0; n];
    for j in 0..l_trunc {
        let inv = 1.0 / nystrom_eigenvalue(basis, j);
        for k in 0..n {
            reconstruction[k] += coefficients[j] * phi[[k, j]];
            lifted[k] += coefficients[j] * phi[[k, j]] * inv;
        }
    }
    let diff: Vec<f64> = f.iter().zip(&reconstruction).map(|(a, b)| a - b).collect();
    let q_factors = (basis.alpha != 0.0).then(|| basis.q.iter().map(|q| q.powf(-basis.alpha)).collect());
    Ok(GhModel {
        basis: basis.clone(),
        spec: *spec,
        train: train.clone(),
        f: f.to_vec(),
        coefficients,
        l_trunc,
        residual: norm(&diff),
        lifted,
        q_factors,
    })
}

impl GhModel {
    /// Cross weights `W(y, x_k) ~ K(y, x_k) Q_k^-alpha`, normalized over `k`.
    /// On a training point they reproduce the Markov operator row exactly.
    pub fn weights(&self, y: &EmbeddedPoint) -> Result<Vec<f64>> {
        weights_from_exponents(&exponent_row(y, &self.train, &self.spec), self.q_factors.as_deref())
    }

    pub fn lifted(&self) -> &[f64] {
        &self.lifted
    }

    /// Truncated in-sample expansion `sum_j <phi_j, f> phi_j(x_k)`.
    pub fn in_sample(&self) -> Vec<f64> {
        let phi = &self.basis.eigenfunctions;
        (0..self.train.len())
            .map(|k| (0..self.l_trunc).map(|j| self.coefficients[j] * phi[[k, j]]).sum())
            .collect()
    }
}

/// Nystrom extension of eigenfunction `j` to `y`.
pub fn gh_extend_eigenfunction(model: &GhModel, j: usize, y: &EmbeddedPoint) -> Result<f64> {
    if j >= model.basis.count() {
        return Err(Error::InvalidArgument(format!("no eigenfunction {j}")));
    }
    let lp = nystrom_eigenvalue(&model.basis, j);
    if lp < EIGENVALUE_FLOOR {
        return Err(Error::IllConditioned {
            index: j,
            value: lp,
            floor: EIGENVALUE_FLOOR,
        });
    }
    let w = model.weights(y)?;
    let phi = model.basis.eigenfunctions.column(j);
    Ok(w.iter().zip(phi.iter()).map(|(a, b)| a * b).sum::<f64>() / lp)
}

/// `f(y) = sum_j <phi_j, f> phi_j(y)` over the truncated basis. Shares its
/// arithmetic with the zero-lead analog forecast over all analogs.
pub fn gh_extend(model: &GhModel, y: &EmbeddedPoint) -> Result<f64> {
    crate::forecast::keaf_gh(model, y, 0, model.train.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpLevel {
    pub spec: KernelSpec,
    /// `d_l` on the training samples, with `d_0 = f`.
    pub residual: Vec<f64>,
    /// Training error after adding this level.
    pub training_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpModel {
    pub base: KernelSpec,
    pub train: EmbeddedSeries,
    pub f: Vec<f64>,
    pub levels: Vec<LpLevel>,
    pub tolerance: f64,
    pub achieved: f64,
}

impl LpModel {
    /// Plain row-normalized weights of level `l` at `y`.
    pub fn weights(&self, level: usize, y: &EmbeddedPoint) -> Result<Vec<f64>> {
        weights_from_exponents(&exponent_row(y, &self.train, &self.levels[level].spec), None)
    }
}

/// Fits a pyramid until the training error drops below `tolerance`
/// (default `1e-6 |f|`).
pub fn lp_fit(
    f: &[f64],
    train: &EmbeddedSeries,
    base: &KernelSpec,
    tolerance: Option<f64>,
    max_levels: usize,
) -> Result<LpModel> {
    check_observable(f, train)?;
    let f_norm = norm(f);
    let tolerance = tolerance.unwrap_or(DEFAULT_RELATIVE_TOLERANCE * f_norm);
    if !(tolerance > 0.0) && f_norm > 0.0 {
        return Err(Error::InvalidArgument(format!("tolerance {tolerance} must be positive")));
    }
    kernels::check_cross(train, train, base)?;
    let mut model = LpModel {
        base: *base,
        train: train.clone(),
        f: f.to_vec(),
        levels: Vec::new(),
        tolerance,
        achieved: f_norm,
    };
    if f_norm == 0.0 || f_norm < tolerance {
        return Ok(model);
    }
    let n = train.len();
    let mut approx = vec![0.0; n];
    let mut residual = f.to_vec();
    for spec in multiscale_family(base, max_levels.saturating_sub(1)).into_iter().take(max_levels) {
        let smooth = map_indexed(n, |i| -> Result<f64> {
            let w = weights_from_exponents(&exponent_row(&train.point(i), train, &spec), None)?;
            Ok(w.iter().zip(&residual).map(|(a, b)| a * b).sum())
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        for (a, s) in approx.iter_mut().zip(&smooth) {
            *a += s;
        }
        let next: Vec<f64> = f.iter().zip(&approx).map(|(a, b)| a - b).collect();
        let err = norm(&next);
        model.levels.push(LpLevel {
            spec,
            residual: std::mem::replace(&mut residual, next),
            training_error: err,
        });
        model.achieved = err;
        if err < tolerance {
            return Ok(model);
        }
    }
    Err(Error::ToleranceUnreachable {
        tolerance,
        achieved: model.achieved,
        levels: model.levels.len(),
    })
}

/// `f(y) = sum_l sum_k W_l(y, x_k) d_l(x_k)`.
pub fn lp_extend(model: &LpModel, y: &EmbeddedPoint) -> Result<f64> {
    crate::forecast::keaf_lp(model, y, 0, model.train.len())
}

const GHMD_MAGIC: &[u8; 4] = b"GHMD";
const LPMD_MAGIC: &[u8; 4] = b"LPMD";
const MODEL_VERSION: u16 = 1;

/// Layout: magic, version, kernel spec, training hash, `l_trunc`, `n`, `f`,
/// then the eigenbasis. The training embedding itself is not stored.
pub fn write_gh_model(path: &Path, m: &GhModel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BinWriter::new(BufWriter::new(file));
    let res = (|| -> std::io::Result<()> {
        w.bytes(GHMD_MAGIC)?;
        w.u16(MODEL_VERSION)?;
        kernels::write_spec(&mut w, &m.spec)?;
        w.bytes(&m.train.content_hash())?;
        w.u64(m.l_trunc as u64)?;
        w.u64(m.f.len() as u64)?;
        w.f64s(m.f.iter())?;
        write_basis_body(&mut w, &m.basis)?;
        w.into_inner().flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Reloads a GH model against the training embedding it was fitted on.
pub fn read_gh_model(path: &Path, train: &EmbeddedSeries) -> Result<GhModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(file));
    r.magic(GHMD_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let spec = kernels::read_spec(&mut r)?;
    if r.hash()? != train.content_hash() {
        return Err(Error::HashMismatch(path.display().to_string()));
    }
    let l_trunc = r.usize()?;
    let n = r.usize()?;
    let f = r.f64_vec(n)?;
    let basis = read_basis_body(&mut r)?;
    r.expect_eof()?;
    gh_fit(&f, &basis, train, &spec, Some(l_trunc))
}

/// Layout: magic, version, base spec, tolerance, achieved error, training
/// hash, `n`, `f`, level count, then per level its spec, training error and
/// residual vector.
pub fn write_lp_model(path: &Path, m: &LpModel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BinWriter::new(BufWriter::new(file));
    let res = (|| -> std::io::Result<()> {
        w.bytes(LPMD_MAGIC)?;
        w.u16(MODEL_VERSION)?;
        kernels::write_spec(&mut w, &m.base)?;
        w.f64(m.tolerance)?;
        w.f64(m.achieved)?;
        w.bytes(&m.train.content_hash())?;
        w.u64(m.f.len() as u64)?;
        w.f64s(m.f.iter())?;
        w.u64(m.levels.len() as u64)?;
        for level in &m.levels {
            kernels::write_spec(&mut w, &level.spec)?;
            w.f64(level.training_error)?;
            w.f64s(level.residual.iter())?;
        }
        w.into_inner().flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_lp_model(path: &Path, train: &EmbeddedSeries) -> Result<LpModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(file));
    r.magic(LPMD_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let base = kernels::read_spec(&mut r)?;
    let tolerance = r.f64()?;
    let achieved = r.f64()?;
    if r.hash()? != train.content_hash() {
        return Err(Error::HashMismatch(path.display().to_string()));
    }
    let n = r.usize()?;
    let f = r.f64_vec(n)?;
    let count = r.usize()?;
    if count > 64 {
        return Err(Error::Format(format!("implausible level count {count}")));
    }
    let mut levels = Vec::with_capacity(count);
    for _ in 0..count {
        let spec = kernels::read_spec(&mut r)?;
        let training_error = r.f64()?;
        let residual = r.f64_vec(n)?;
        levels.push(LpLevel {
            spec,
            residual,
            training_error,
        });
    }
    r.expect_eof()?;
    Ok(LpModel {
        base,
        train: train.clone(),
        f,
        levels,
        tolerance,
        achieved,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::dataset::Dataset;
    use crate::embedding::embed;
    use crate::kernels::build_matrix;
    use crate::laplacian::{decompose, InnerProduct};

    fn circle(n: usize, turns: f64) -> EmbeddedSeries {
        let values = Array2::from_shape_fn((n, 2), |(i, j)| {
            let t = i as f64 + 0.3 * (i as f64).sin();
            let a = 2.0 * std::f64::consts::PI * turns * t / n as f64;
            if j == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        let ds = Dataset::new("z", 0, 1, values, None).unwrap();
        embed(&ds, 1).unwrap().with_velocities().unwrap()
    }

    fn model(train: &EmbeddedSeries, spec: &KernelSpec, f: &[f64], l: usize, trunc: Option<usize>) -> GhModel {
        let k = build_matrix(train, spec).unwrap();
        let b = decompose(&k, l, InnerProduct::Degree).unwrap();
        gh_fit(f, &b, train, spec, trunc).unwrap()
    }

    #[test]
    fn basis_element_projects_to_indicator() {
        let train = circle(60, 1.0);
        let spec = KernelSpec::nlsa(1.0);
        let k = build_matrix(&train, &spec).unwrap();
        let b = decompose(&k, 8, InnerProduct::Degree).unwrap();
        let f: Vec<f64> = b.eigenfunctions.column(2).to_vec();
        let m = gh_fit(&f, &b, &train, &spec, Some(5)).unwrap();
        for (j, c) in m.coefficients.iter().enumerate() {
            let want = if j == 2 { 1.0 } else { 0.0 };
            assert!((c - want).abs() < 1e-10, "{j}: {c}");
        }
        assert!(m.residual < 1e-10);
    }

    #[test]
    fn constant_observable_uses_first_mode_only() {
        let train = circle(50, 1.0);
        let m = model(&train, &KernelSpec::nlsa(1.0), &vec![2.5; 50 - 1], 6, Some(6));
        assert!(m.coefficients.iter().skip(1).all(|c| c.abs() < 1e-10));
        let y = circle(80, 1.3);
        for i in 0..y.len() {
            assert!((gh_extend(&m, &y.point(i)).unwrap() - 2.5).abs() < 1e-10);
        }
    }

    #[test]
    fn restriction_consistency_with_alpha() {
        let train = circle(70, 2.0);
        for alpha in [0.0, 0.5, 1.0] {
            let spec = KernelSpec::nlsa(1.0).with_alpha(alpha);
            let f: Vec<f64> = (0..train.len()).map(|i| (i as f64 * 0.2).sin()).collect();
            let m = model(&train, &spec, &f, 10, Some(10));
            let want = m.in_sample();
            for k in 0..train.len() {
                let got = gh_extend(&m, &train.point(k)).unwrap();
                assert!((got - want[k]).abs() < 1e-8, "alpha {alpha}, k {k}");
                let phi = gh_extend_eigenfunction(&m, 3, &train.point(k)).unwrap();
                assert!((phi - m.basis.eigenfunctions[[k, 3]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn floor_rejects_flat_modes() {
        // Near-identical samples give Markov eigenvalues near zero.
        let train = circle(40, 1.0);
        let spec = KernelSpec::gaussian(1e9);
        let k = build_matrix(&train, &spec).unwrap();
        let b = decompose(&k, 5, InnerProduct::Degree).unwrap();
        assert!(matches!(
            gh_fit(&vec![1.0; 39], &b, &train, &spec, Some(5)),
            Err(Error::IllConditioned { .. })
        ));
        assert_eq!(default_truncation(&b), 1);
    }

    #[test]
    fn gh_rejects_foreign_basis() {
        let train = circle(40, 1.0);
        let spec = KernelSpec::nlsa(1.0);
        let k = build_matrix(&train, &spec).unwrap();
        let b = decompose(&k, 5, InnerProduct::Degree).unwrap();
        assert!(matches!(
            gh_fit(&vec![1.0; 39], &b, &train, &KernelSpec::nlsa(2.0), None),
            Err(Error::HashMismatch(_))
        ));
    }

    #[test]
    fn lp_zero_observable_needs_no_levels() {
        let train = circle(30, 1.0);
        let m = lp_fit(&vec![0.0; 29], &train, &KernelSpec::nlsa(2.0), None, 12).unwrap();
        assert!(m.levels.is_empty());
        assert_eq!(lp_extend(&m, &train.point(3)).unwrap(), 0.0);
    }

    #[test]
    fn lp_constant_and_fit() {
        let train = circle(120, 1.0);
        let m = lp_fit(&vec![-1.25; 119], &train, &KernelSpec::nlsa(2.0), None, 12).unwrap();
        let y = circle(57, 0.7);
        for i in 0..y.len() {
            assert!((lp_extend(&m, &y.point(i)).unwrap() + 1.25).abs() < 1e-10);
        }
        let f: Vec<f64> = (0..119).map(|i| 0.3 + train.point(i).components[0][0]).collect();
        let m = lp_fit(&f, &train, &KernelSpec::nlsa(2.0), None, 12).unwrap();
        assert!(m.achieved < 1e-6 * norm(&f));
        for w in m.levels.windows(2) {
            assert!(w[1].training_error <= w[0].training_error);
            assert!(w[1].spec.epsilon < w[0].spec.epsilon);
        }
        for k in 0..train.len() {
            assert!((lp_extend(&m, &train.point(k)).unwrap() - f[k]).abs() <= m.achieved);
        }
    }

    #[test]
    fn lp_reports_unreachable_tolerance() {
        let train = circle(60, 1.0);
        let f: Vec<f64> = (0..59).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(matches!(
            lp_fit(&f, &train, &KernelSpec::nlsa(50.0), Some(1e-12), 1),
            Err(Error::ToleranceUnreachable { levels: 1, .. })
        ));
    }

    #[test]
    fn model_files_round_trip() {
        let train = circle(40, 1.0);
        let spec = KernelSpec::nlsa(1.0);
        let f: Vec<f64> = (0..39).map(|i| (i as f64).sqrt()).collect();
        let gh = model(&train, &spec, &f, 6, None);
        let lp = lp_fit(&f, &train, &spec, None, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pg, pl) = (dir.path().join("m.ghmd"), dir.path().join("m.lpmd"));
        write_gh_model(&pg, &gh).unwrap();
        write_lp_model(&pl, &lp).unwrap();
        assert_eq!(read_gh_model(&pg, &train).unwrap(), gh);
        assert_eq!(read_lp_model(&pl, &train).unwrap(), lp);
        let other = circle(41, 1.0);
        assert!(matches!(read_gh_model(&pg, &other), Err(Error::HashMismatch(_))));
    }
}

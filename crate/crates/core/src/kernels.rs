//! Pairwise similarity kernels on embedded data.
//!
//! * Gaussian: `exp(-|x_i - x_j|^2 / sigma0)`.
//! * NLSA: `exp(-|x_i - x_j|^2 / (eps * xi_i * xi_j))`, where `xi` is the
//!   phase velocity of each sample.
//! * Multivariate NLSA: the product of per-component NLSA factors with a
//!   shared `eps`; each factor is dimensionless, so the kernel does not care
//!   about the physical units of each variable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::binio::{BinReader, BinWriter};
use crate::embedding::{EmbeddedPoint, EmbeddedSeries};
use crate::error::{Error, Result};
use crate::hash::ContentHasher;
use crate::par::map_indexed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Gaussian,
    Nlsa,
    NlsaMultivariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Scale of the NLSA kinds.
    pub epsilon: f64,
    /// Scale of the Gaussian kind, in squared-distance units.
    pub sigma0: f64,
    /// Diffusion-maps normalization exponent (0, 1/2 or 1).
    pub alpha: f64,
}

impl KernelSpec {
    pub fn gaussian(sigma0: f64) -> Self {
        Self {
            kind: KernelKind::Gaussian,
            epsilon: 1.0,
            sigma0,
            alpha: 0.0,
        }
    }

    pub fn nlsa(epsilon: f64) -> Self {
        Self {
            kind: KernelKind::Nlsa,
            epsilon,
            sigma0: 1.0,
            alpha: 0.0,
        }
    }

    pub fn nlsa_multivariate(epsilon: f64) -> Self {
        Self {
            kind: KernelKind::NlsaMultivariate,
            ..Self::nlsa(epsilon)
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            KernelKind::Gaussian if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) => {
                Err(Error::InvalidArgument(format!("sigma0 = {} must be positive", self.sigma0)))
            }
            KernelKind::Nlsa | KernelKind::NlsaMultivariate if !(self.epsilon > 0.0 && self.epsilon.is_finite()) => {
                Err(Error::InvalidArgument(format!("epsilon = {} must be positive", self.epsilon)))
            }
            _ if !self.alpha.is_finite() => Err(Error::InvalidArgument("alpha must be finite".into())),
            _ => Ok(()),
        }
    }

    fn uses_velocities(&self) -> bool {
        !matches!(self.kind, KernelKind::Gaussian)
    }

    /// The bandwidth that the multiscale family halves per level.
    pub fn scale(&self) -> f64 {
        match self.kind {
            KernelKind::Gaussian => self.sigma0,
            _ => self.epsilon,
        }
    }

    fn with_scale(mut self, scale: f64) -> Self {
        match self.kind {
            KernelKind::Gaussian => self.sigma0 = scale,
            _ => self.epsilon = scale,
        }
        self
    }

    pub(crate) fn hash_into(&self, h: &mut ContentHasher) {
        h.str(match self.kind {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Nlsa => "nlsa",
            KernelKind::NlsaMultivariate => "nlsa-multivariate",
        });
        h.f64(self.epsilon).f64(self.sigma0).f64(self.alpha);
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

pub fn gaussian(xi: ArrayView1<f64>, xj: ArrayView1<f64>, sigma0: f64) -> f64 {
    (-sq_dist(xi, xj) / sigma0).exp()
}

pub fn nlsa(xi: ArrayView1<f64>, xj: ArrayView1<f64>, velocity_i: f64, velocity_j: f64, epsilon: f64) -> f64 {
    (-sq_dist(xi, xj) / (epsilon * (velocity_i * velocity_j))).exp()
}

/// Product of per-component NLSA factors; each argument is `(state, velocity)`.
pub fn nlsa_multivariate(
    xi: &[(ArrayView1<f64>, f64)],
    xj: &[(ArrayView1<f64>, f64)],
    epsilon: f64,
) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::Shape(format!("{} components vs {}", xi.len(), xj.len())));
    }
    let exponent: f64 = xi
        .iter()
        .zip(xj)
        .map(|((a, va), (b, vb))| sq_dist(a.view(), b.view()) / (epsilon * (va * vb)))
        .sum();
    Ok((-exponent).exp())
}

/// `-log K(y, x)` between two embedded points with matching structure.
fn exponent(y: &EmbeddedPoint, x: &EmbeddedPoint, spec: &KernelSpec) -> f64 {
    match spec.kind {
        KernelKind::Gaussian => {
            y.components
                .iter()
                .zip(&x.components)
                .map(|(a, b)| sq_dist(a.view(), b.view()))
                .sum::<f64>()
                / spec.sigma0
        }
        _ => y
            .components
            .iter()
            .zip(&x.components)
            .zip(y.velocities.iter().zip(&x.velocities))
            .map(|((a, b), (va, vb))| sq_dist(a.view(), b.view()) / (spec.epsilon * (va * vb)))
            .sum(),
    }
}

fn pair(y: &EmbeddedPoint, x: &EmbeddedPoint, spec: &KernelSpec) -> f64 {
    (-exponent(y, x, spec)).exp()
}

fn check_structure(emb: &EmbeddedSeries, spec: &KernelSpec) -> Result<()> {
    spec.validate()?;
    if spec.kind == KernelKind::Nlsa && emb.components().len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "the nlsa kernel takes one component, got {}; use nlsa-multivariate",
            emb.components().len()
        )));
    }
    if spec.uses_velocities() {
        emb.require_velocities()?;
    }
    Ok(())
}

fn check_compatible(test: &EmbeddedSeries, train: &EmbeddedSeries) -> Result<()> {
    let shape = |e: &EmbeddedSeries| -> Vec<usize> { e.components().iter().map(|c| c.values.ncols()).collect() };
    if shape(test) != shape(train) {
        return Err(Error::Shape(format!(
            "test components {:?} do not match training components {:?}",
            shape(test),
            shape(train)
        )));
    }
    Ok(())
}

/// Dense in-sample kernel matrix with its row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
    pub row_sums: Array1<f64>,
    pub spec: KernelSpec,
    pub timestamps: Vec<i64>,
    pub hash: [u8; 32],
}

pub fn kernel_hash(emb: &EmbeddedSeries, spec: &KernelSpec) -> [u8; 32] {
    let mut h = ContentHasher::new();
    h.str("kernel");
    emb.hash_into(&mut h);
    spec.hash_into(&mut h);
    h.finish()
}

pub fn build_matrix(emb: &EmbeddedSeries, spec: &KernelSpec) -> Result<KernelMatrix> {
    check_structure(emb, spec)?;
    let n = emb.len();
    if n < 2 {
        return Err(Error::InvalidArgument("kernel matrix needs at least two samples".into()));
    }
    let upper = map_indexed(n, |i| {
        let yi = emb.point(i);
        (i..n).map(|j| pair(&yi, &emb.point(j), spec)).collect::<Vec<f64>>()
    });
    let mut values = Array2::zeros((n, n));
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            if !v.is_finite() {
                return Err(Error::NonFiniteKernel { row: i, col: j });
            }
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    let row_sums = values.sum_axis(ndarray::Axis(1));
    Ok(KernelMatrix {
        values,
        row_sums,
        spec: *spec,
        timestamps: emb.timestamps().to_vec(),
        hash: kernel_hash(emb, spec),
    })
}

/// Kernel values between every test sample and every training sample.
pub fn cross_matrix(test: &EmbeddedSeries, train: &EmbeddedSeries, spec: &KernelSpec) -> Result<Array2<f64>> {
    check_cross(test, train, spec)?;
    let (m, n) = (test.len(), train.len());
    let rows = map_indexed(m, |i| kernel_row(&test.point(i), train, spec));
    let mut out = Array2::zeros((m, n));
    for (i, row) in rows.into_iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteKernel { row: i, col: j });
        }
        out.row_mut(i).assign(&Array1::from(row));
    }
    Ok(out)
}

/// Kernel values between one point and every training sample.
pub fn kernel_row(y: &EmbeddedPoint, train: &EmbeddedSeries, spec: &KernelSpec) -> Vec<f64> {
    (0..train.len()).map(|j| pair(y, &train.point(j), spec)).collect()
}

/// `-log K(y, x_k)` for every training sample. Callers that normalize the
/// row can subtract the minimum before exponentiating, which keeps very fine
/// bandwidths from underflowing every entry to zero.
pub fn exponent_row(y: &EmbeddedPoint, train: &EmbeddedSeries, spec: &KernelSpec) -> Vec<f64> {
    (0..train.len()).map(|j| exponent(y, &train.point(j), spec)).collect()
}

/// Checks that test points can be evaluated against a training series.
pub fn check_cross(test: &EmbeddedSeries, train: &EmbeddedSeries, spec: &KernelSpec) -> Result<()> {
    check_structure(train, spec)?;
    check_structure(test, spec)?;
    check_compatible(test, train)
}

/// Divides each row by its sum, yielding a discrete probability distribution
/// over the second argument.
pub fn row_normalize(k: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = k.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let s: f64 = row.sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::ZeroRow(i));
        }
        row.mapv_inplace(|v| v / s);
    }
    Ok(out)
}

/// Dyadic family: level `l` divides the base bandwidth by `2^l`
/// (`sigma0` for Gaussian kernels, `epsilon` for NLSA kernels).
pub fn multiscale_family(spec: &KernelSpec, max_level: usize) -> Vec<KernelSpec> {
    (0..=max_level)
        .map(|l| spec.with_scale(spec.scale() / 2f64.powi(l as i32)))
        .collect()
}

/// How the Gaussian bandwidth is chosen from training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sigma0Policy {
    /// Median of pairwise squared distances (default).
    MedianSquared,
    /// Median of pairwise distances, read literally.
    MedianDistance,
    Fixed(f64),
}

pub fn choose_sigma0(emb: &EmbeddedSeries, policy: Sigma0Policy) -> Result<f64> {
    let n = emb.len();
    let squared = || {
        let mut d: Vec<f64> = (0..n)
            .flat_map(|i| {
                let yi = emb.point(i);
                (i + 1..n)
                    .map(move |j| {
                        let xj = emb.point(j);
                        yi.components
                            .iter()
                            .zip(&xj.components)
                            .map(|(a, b)| sq_dist(a.view(), b.view()))
                            .sum::<f64>()
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        d
    };
    let median = |d: &[f64]| -> f64 {
        let m = d.len();
        if m % 2 == 1 {
            d[m / 2]
        } else {
            0.5 * (d[m / 2 - 1] + d[m / 2])
        }
    };
    let sigma0 = match policy {
        Sigma0Policy::Fixed(s) => s,
        Sigma0Policy::MedianSquared | Sigma0Policy::MedianDistance if n < 2 => {
            return Err(Error::InvalidArgument("need two samples to choose sigma0".into()));
        }
        Sigma0Policy::MedianSquared => median(&squared()),
        Sigma0Policy::MedianDistance => {
            let d: Vec<f64> = squared().into_iter().map(f64::sqrt).collect();
            median(&d)
        }
    };
    if !(sigma0 > 0.0) {
        return Err(Error::Degenerate("all training samples coincide".into()));
    }
    Ok(sigma0)
}

pub(crate) fn write_spec<W: Write>(w: &mut BinWriter<W>, spec: &KernelSpec) -> std::io::Result<()> {
    w.u8(match spec.kind {
        KernelKind::Gaussian => 0,
        KernelKind::Nlsa => 1,
        KernelKind::NlsaMultivariate => 2,
    })?;
    w.f64(spec.epsilon)?;
    w.f64(spec.sigma0)?;
    w.f64(spec.alpha)
}

pub(crate) fn read_spec<R: Read>(r: &mut BinReader<R>) -> Result<KernelSpec> {
    let kind = match r.u8()? {
        0 => KernelKind::Gaussian,
        1 => KernelKind::Nlsa,
        2 => KernelKind::NlsaMultivariate,
        other => return Err(Error::Format(format!("unknown kernel kind {other}"))),
    };
    Ok(KernelSpec {
        kind,
        epsilon: r.f64()?,
        sigma0: r.f64()?,
        alpha: r.f64()?,
    })
}

const KMAT_MAGIC: &[u8; 4] = b"KMAT";
const KMAT_VERSION: u16 = 1;

/// Writes `magic, version, n, hash, row-major values`.
pub fn write_kernel_cache(path: &Path, k: &KernelMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BinWriter::new(BufWriter::new(file));
    let res = (|| -> std::io::Result<()> {
        w.bytes(KMAT_MAGIC)?;
        w.u16(KMAT_VERSION)?;
        w.u64(k.values.nrows() as u64)?;
        w.bytes(&k.hash)?;
        w.f64s(k.values.iter())?;
        w.into_inner().flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Loads a cached kernel, rejecting it if its hash differs from `expected`.
pub fn read_kernel_cache(path: &Path, expected: &[u8; 32], spec: &KernelSpec, timestamps: &[i64]) -> Result<KernelMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(file));
    r.magic(KMAT_MAGIC)?;
    r.version(KMAT_VERSION)?;
    let n = r.usize()?;
    let hash = r.hash()?;
    if &hash != expected {
        return Err(Error::HashMismatch(path.display().to_string()));
    }
    let values = Array2::from_shape_vec((n, n), r.f64_vec(n * n)?).map_err(|e| Error::Shape(e.to_string()))?;
    r.expect_eof()?;
    let row_sums = values.sum_axis(ndarray::Axis(1));
    Ok(KernelMatrix {
        values,
        row_sums,
        spec: *spec,
        timestamps: timestamps.to_vec(),
        hash,
    })
}

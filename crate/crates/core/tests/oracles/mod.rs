//! Brute-force references. None of these call the code they check.
#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum OracleKernel {
    Gaussian { sigma0: f64 },
    Nlsa { epsilon: f64 },
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    if m == 0 {
        0.0
    } else if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    }
}

/// Lag vector at time `t`: newest snapshot first.
fn lagged(rows: &[Vec<f64>], t: usize, q: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for lag in 0..q {
        out.extend_from_slice(&rows[t - lag]);
    }
    out
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Kernel matrix over raw records (one `N x d` table per variable, all
/// sampled at the same times) embedded with windows `qs`. Velocities are
/// first differences of the lag vectors with the relative floor `1e-12`
/// times their median.
pub fn oracle_pairwise_kernel(records: &[Vec<Vec<f64>>], qs: &[usize], kernel: OracleKernel) -> Vec<Vec<f64>> {
    let big_n = records[0].len();
    let nlsa = matches!(kernel, OracleKernel::Nlsa { .. });
    let extra = usize::from(nlsa);
    let start = qs.iter().map(|q| q - 1 + extra).max().unwrap();
    let times: Vec<usize> = (start..big_n).collect();
    let mut xi: Vec<Vec<f64>> = Vec::new();
    for (rec, &q) in records.iter().zip(qs) {
        let mut raw = vec![0.0; big_n];
        for t in q..big_n {
            raw[t] = sq(&lagged(rec, t, q), &lagged(rec, t - 1, q)).sqrt();
        }
        let own = &raw[q..];
        let mut reference = median(own);
        if reference <= 0.0 {
            let mean = own.iter().sum::<f64>() / own.len().max(1) as f64;
            reference = if mean > 0.0 { mean } else { 1.0 };
        }
        let floor = 1e-12 * reference;
        xi.push(raw.iter().map(|v| v.max(floor)).collect());
    }
    let n = times.len();
    let mut k = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let (ta, tb) = (times[a], times[b]);
            let mut e = 0.0;
            for (v, (rec, &q)) in records.iter().zip(qs).enumerate() {
                let d2 = sq(&lagged(rec, ta, q), &lagged(rec, tb, q));
                e += match kernel {
                    OracleKernel::Gaussian { sigma0 } => d2 / sigma0,
                    OracleKernel::Nlsa { epsilon } => d2 / (epsilon * xi[v][ta] * xi[v][tb]),
                };
            }
            k[a][b] = (-e).exp();
        }
    }
    k
}

/// Real roots of `x^3 + a x^2 + b x + c` when all three are real, ascending.
fn cubic_roots(a: f64, b: f64, c: f64) -> [f64; 3] {
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let shift = -a / 3.0;
    let mut r = if p.abs() < 1e-300 {
        let t = (-q).cbrt();
        [t + shift; 3]
    } else {
        let m = 2.0 * (-p / 3.0).max(0.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift;
        }
        out
    };
    r.sort_by(f64::total_cmp);
    r
}

pub struct Eig3 {
    /// Ascending eigenvalues of `L = I - P`.
    pub lambda: [f64; 3],
    /// Columns are eigenfunctions, unit norm in the degree inner product,
    /// largest magnitude entry positive.
    pub phi: [[f64; 3]; 3],
    pub degree: [f64; 3],
}

fn refine(p: &[[f64; 3]; 3], mu: f64) -> f64 {
    // Two Newton steps on the characteristic polynomial.
    let det = |m: f64| {
        let a = [[p[0][0] - m, p[0][1], p[0][2]], [p[1][0], p[1][1] - m, p[1][2]], [p[2][0], p[2][1], p[2][2] - m]];
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let mut m = mu;
    for _ in 0..2 {
        let h = 1e-7;
        let d = (det(m + h) - det(m - h)) / (2.0 * h);
        if d.abs() > 1e-8 {
            m -= det(m) / d;
        }
    }
    m
}

/// Exact eigenpairs of the Markov normalization of a symmetric 3x3 kernel.
pub fn oracle_eig3(k: [[f64; 3]; 3], alpha: f64) -> Eig3 {
    let q: Vec<f64> = (0..3).map(|i| k[i].iter().sum()).collect();
    let mut kt = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            kt[i][j] = k[i][j] / (q[i].powf(alpha) * q[j].powf(alpha));
        }
    }
    let d: [f64; 3] = [0, 1, 2].map(|i| kt[i].iter().sum());
    let mut p = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            p[i][j] = kt[i][j] / d[i];
        }
    }
    let tr = p[0][0] + p[1][1] + p[2][2];
    let minors = p[0][0] * p[1][1] - p[0][1] * p[1][0] + p[0][0] * p[2][2] - p[0][2] * p[2][0] + p[1][1] * p[2][2]
        - p[1][2] * p[2][1];
    let det = p[0][0] * (p[1][1] * p[2][2] - p[1][2] * p[2][1]) - p[0][1] * (p[1][0] * p[2][2] - p[1][2] * p[2][0])
        + p[0][2] * (p[1][0] * p[2][1] - p[1][1] * p[2][0]);
    // det(mu I - P) = mu^3 - tr mu^2 + minors mu - det
    let mus = cubic_roots(-tr, minors, -det);
    let mut lambda = [0.0; 3];
    let mut phi = [[0.0; 3]; 3];
    // Descending mu is ascending lambda.
    for (col, &mu0) in mus.iter().rev().enumerate() {
        let mu = refine(&p, mu0);
        lambda[col] = 1.0 - mu;
        let rows: Vec<[f64; 3]> = (0..3)
            .map(|i| {
                let mut r = p[i];
                r[i] -= mu;
                r
            })
            .collect();
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
        };
        let mut best = [0.0; 3];
        let mut best_norm = -1.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let c = cross(rows[i], rows[j]);
            let nrm = c.iter().map(|v| v * v).sum::<f64>();
            if nrm > best_norm {
                best_norm = nrm;
                best = c;
            }
        }
        let scale = (0..3).map(|i| d[i] * best[i] * best[i]).sum::<f64>().sqrt();
        let mut v = best.map(|x| x / scale);
        let imax = (0..3).fold(0, |m, i| if v[i].abs() > v[m].abs() { i } else { m });
        if v[imax] < 0.0 {
            v = v.map(|x| -x);
        }
        for i in 0..3 {
            phi[i][col] = v[i];
        }
    }
    lambda[0] = lambda[0].max(0.0).min(lambda[0].abs());
    Eig3 { lambda, phi, degree: d }
}

/// A realization of the chain and its empirical transition frequencies.
pub fn oracle_markov_mc(t: &[Vec<f64>], n: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let k = t.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = vec![0usize];
    for _ in 1..n {
        let u: f64 = rng.random();
        let row = &t[*states.last().unwrap()];
        let mut acc = 0.0;
        let mut next = k - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        states.push(next);
    }
    let mut counts = vec![vec![0.0; k]; k];
    for w in states.windows(2) {
        counts[w[0]][w[1]] += 1.0;
    }
    let freq = counts
        .iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|c| if s > 0.0 { c / s } else { 0.0 }).collect()
        })
        .collect();
    (states, freq)
}

/// `(rmse, pc)` by explicit loops; `pc` is `None` for a constant input.
pub fn oracle_skill(pred: &[f64], truth: &[f64]) -> (f64, Option<f64>) {
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for i in 0..pred.len() {
        se += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        sp += pred[i];
        st += truth[i];
    }
    let (mp, mt) = (sp / n, st / n);
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for i in 0..pred.len() {
        cov += (pred[i] - mp) * (truth[i] - mt);
        vp += (pred[i] - mp) * (pred[i] - mp);
        vt += (truth[i] - mt) * (truth[i] - mt);
    }
    let pc = if vp > 0.0 && vt > 0.0 {
        Some((cov / n) / ((vp / n).sqrt() * (vt / n).sqrt()))
    } else {
        None
    };
    ((se / n).sqrt(), pc)
}

/// Comparison of oracle and implementation values, written as CSV under the
/// test output directory.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub oracle: String,
    pub inputs_hash: String,
    pub reference: Vec<f64>,
    pub implementation: Vec<f64>,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when every absolute deviation is within `tolerance`.
    pub fn compare(oracle: &str, inputs: &[f64], reference: Vec<f64>, implementation: Vec<f64>, tolerance: f64) -> Self {
        assert_eq!(reference.len(), implementation.len(), "{oracle}: length mismatch");
        let mut bytes = Vec::with_capacity(inputs.len() * 8);
        for v in inputs {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for (r, i) in reference.iter().zip(&implementation) {
            let a = (r - i).abs();
            max_abs = max_abs.max(a);
            if r.abs() > 0.0 {
                max_rel = max_rel.max(a / r.abs());
            }
        }
        let report = Self {
            oracle: oracle.to_string(),
            inputs_hash: analogcast_core::hash::hex(&analogcast_core::hash::sha256(&bytes)),
            reference,
            implementation,
            max_abs,
            max_rel,
            tolerance,
            pass: max_abs <= tolerance,
        };
        report.write();
        report
    }

    fn write(&self) {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("oracle_reports");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("{}-{}.csv", self.oracle, &self.inputs_hash[..12]));
        let mut f = std::fs::File::create(path).unwrap();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        writeln!(f, "oracle,inputs_hash,max_abs_dev,max_rel_dev,tolerance,pass,reference,implementation").unwrap();
        writeln!(
            f,
            "{},{},{:e},{:e},{:e},{},{},{}",
            self.oracle,
            self.inputs_hash,
            self.max_abs,
            self.max_rel,
            self.tolerance,
            self.pass,
            join(&self.reference),
            join(&self.implementation)
        )
        .unwrap();
    }
}

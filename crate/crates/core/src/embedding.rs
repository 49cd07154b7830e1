//! Delay-coordinate (Takens) embedding.
//!
//! Row `i` of an embedded component is `(z(t_i), z(t_{i-1}), ..., z(t_{i-q+1}))`
//! and is stamped with the timestamp of its lead snapshot `t_i`. Components
//! with different windows are aligned on that lead timestamp.
//!
//! Phase velocities `xi_i = |x(t_i) - x(t_{i-1})|` need a predecessor, so
//! [`EmbeddedSeries::with_velocities`] drops the first sample and floors
//! velocities at `1e-12 * median(xi)` to keep the kernel finite on exact
//! repeats.

use ndarray::{s, Array1, Array2, ArrayView1};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hash::ContentHasher;

/// Relative floor applied to phase velocities.
pub const VELOCITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedComponent {
    pub name: String,
    /// Embedding window in samples.
    pub window: usize,
    pub grid_size: usize,
    /// `n x (grid_size * window)`.
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSeries {
    components: Vec<EmbeddedComponent>,
    timestamps: Vec<i64>,
    dt: i64,
    velocities: Option<Vec<Array1<f64>>>,
}

/// One sample of an embedded series, borrowed per component.
#[derive(Debug, Clone)]
pub struct EmbeddedPoint<'a> {
    pub components: Vec<ArrayView1<'a, f64>>,
    pub velocities: Vec<f64>,
}

impl EmbeddedSeries {
    pub fn components(&self) -> &[EmbeddedComponent] {
        &self.components
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn dt(&self) -> i64 {
        self.dt
    }

    /// Number of samples in embedding space.
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Per-component phase velocities, present after [`Self::with_velocities`].
    pub fn velocities(&self) -> Option<&[Array1<f64>]> {
        self.velocities.as_deref()
    }

    pub fn require_velocities(&self) -> Result<&[Array1<f64>]> {
        self.velocities()
            .ok_or_else(|| Error::InvalidArgument("embedded series has no phase velocities".into()))
    }

    /// Total embedded dimension over all components.
    pub fn dimension(&self) -> usize {
        self.components.iter().map(|c| c.values.ncols()).sum()
    }

    pub fn point(&self, i: usize) -> EmbeddedPoint<'_> {
        EmbeddedPoint {
            components: self.components.iter().map(|c| c.values.row(i)).collect(),
            velocities: self
                .velocities
                .as_ref()
                .map(|v| v.iter().map(|xi| xi[i]).collect())
                .unwrap_or_default(),
        }
    }

    /// Drops the first sample and attaches floored phase velocities.
    pub fn with_velocities(self) -> Result<EmbeddedSeries> {
        if self.len() < 2 {
            return Err(Error::InvalidArgument(
                "phase velocities need at least two embedded samples".into(),
            ));
        }
        let raw = phase_velocity(&self);
        let velocities = raw.into_iter().map(floor_velocities).collect();
        let mut out = self.drop_front(1);
        out.velocities = Some(velocities);
        Ok(out)
    }

    fn drop_front(&self, k: usize) -> EmbeddedSeries {
        self.slice(k, self.len())
    }

    /// Samples `start..end`, keeping velocities when present.
    pub fn slice(&self, start: usize, end: usize) -> EmbeddedSeries {
        EmbeddedSeries {
            components: self
                .components
                .iter()
                .map(|c| EmbeddedComponent {
                    name: c.name.clone(),
                    window: c.window,
                    grid_size: c.grid_size,
                    values: c.values.slice(s![start..end, ..]).to_owned(),
                })
                .collect(),
            timestamps: self.timestamps[start..end].to_vec(),
            dt: self.dt,
            velocities: self
                .velocities
                .as_ref()
                .map(|v| v.iter().map(|xi| xi.slice(s![start..end]).to_owned()).collect()),
        }
    }

    /// Returns a copy with one component's values multiplied by `factor`.
    pub fn scale_component(&self, index: usize, factor: f64) -> EmbeddedSeries {
        let mut out = self.clone();
        out.components[index].values.mapv_inplace(|v| v * factor);
        if let Some(v) = out.velocities.as_mut() {
            v[index].mapv_inplace(|x| x * factor.abs());
        }
        out
    }

    /// Rebuilds the original snapshots of one component from its embedding.
    pub fn unembed(&self, component: usize) -> Array2<f64> {
        let c = &self.components[component];
        let (n, d, q) = (self.len(), c.grid_size, c.window);
        let mut out = Array2::zeros((n + q - 1, d));
        // Initial q-1 snapshots come from the oldest lags of row 0.
        for lag in (1..q).rev() {
            out.row_mut(q - 1 - lag)
                .assign(&c.values.slice(s![0, lag * d..(lag + 1) * d]));
        }
        for i in 0..n {
            out.row_mut(i + q - 1).assign(&c.values.slice(s![i, 0..d]));
        }
        out
    }

    pub(crate) fn hash_into(&self, h: &mut ContentHasher) {
        h.i64(self.dt).u64(self.len() as u64);
        for t in &self.timestamps {
            h.i64(*t);
        }
        for c in &self.components {
            h.str(&c.name).u64(c.window as u64).u64(c.grid_size as u64);
            h.f64s(c.values.iter());
        }
        if let Some(v) = &self.velocities {
            for xi in v {
                h.f64s(xi.iter());
            }
        }
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = ContentHasher::new();
        self.hash_into(&mut h);
        h.finish()
    }
}

fn floor_velocities(mut xi: Array1<f64>) -> Array1<f64> {
    let mut sorted: Vec<f64> = xi.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let reference = if median > 0.0 {
        median
    } else {
        // Mostly repeated states: fall back to the mean, then to unity.
        let mean = sorted.iter().sum::<f64>() / sorted.len().max(1) as f64;
        if mean > 0.0 {
            mean
        } else {
            1.0
        }
    };
    let floor = VELOCITY_FLOOR * reference;
    xi.mapv_inplace(|v| v.max(floor));
    xi
}

/// Lag-embeds `data` with a window of `q` samples.
pub fn embed(data: &Dataset, q: usize) -> Result<EmbeddedSeries> {
    let big_n = data.len();
    if q == 0 {
        return Err(Error::InvalidArgument("embedding window must be at least 1".into()));
    }
    if q > big_n {
        return Err(Error::InvalidArgument(format!(
            "embedding window {q} exceeds the {big_n} available samples"
        )));
    }
    let d = data.grid_size();
    let n = big_n - q + 1;
    let z = data.values();
    let mut values = Array2::zeros((n, d * q));
    for i in 0..n {
        let lead = i + q - 1;
        for lag in 0..q {
            values
                .slice_mut(s![i, lag * d..(lag + 1) * d])
                .assign(&z.row(lead - lag));
        }
    }
    Ok(EmbeddedSeries {
        components: vec![EmbeddedComponent {
            name: data.variable_name().to_string(),
            window: q,
            grid_size: d,
            values,
        }],
        timestamps: data.timestamps()[q - 1..].to_vec(),
        dt: data.dt(),
        velocities: None,
    })
}

/// Raw (unfloored) phase velocities for samples `1..n`, one vector per component.
pub fn phase_velocity(emb: &EmbeddedSeries) -> Vec<Array1<f64>> {
    emb.components
        .iter()
        .map(|c| {
            let x = &c.values;
            (1..x.nrows())
                .map(|i| {
                    x.row(i)
                        .iter()
                        .zip(x.row(i - 1))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

/// Concatenates components, keeping the common lead-timestamp range.
pub fn join(series: &[EmbeddedSeries]) -> Result<EmbeddedSeries> {
    let first = series
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to join".into()))?;
    let dt = first.dt;
    if series.iter().any(|s| s.dt != dt) {
        return Err(Error::InvalidArgument("joined series must share the sampling step".into()));
    }
    if series.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("cannot join an empty series".into()));
    }
    let has_velocities = first.velocities.is_some();
    if series.iter().any(|s| s.velocities.is_some() != has_velocities) {
        return Err(Error::InvalidArgument(
            "either all or none of the joined series must carry phase velocities".into(),
        ));
    }
    let start = series.iter().map(|s| s.timestamps[0]).max().unwrap();
    let end = series.iter().map(|s| *s.timestamps.last().unwrap()).min().unwrap();
    if series.iter().any(|s| (s.timestamps[0] - start) % dt != 0) {
        return Err(Error::InvalidArgument("series sit on different time grids".into()));
    }
    if start > end {
        return Err(Error::InvalidArgument("joined series have no common timestamps".into()));
    }
    let mut components = Vec::new();
    let mut velocities = has_velocities.then(Vec::new);
    let mut timestamps = Vec::new();
    for s in series {
        let lo = ((start - s.timestamps[0]) / dt) as usize;
        let hi = ((end - s.timestamps[0]) / dt) as usize + 1;
        let part = s.slice(lo, hi);
        timestamps = part.timestamps.clone();
        components.extend(part.components);
        if let (Some(v), Some(pv)) = (velocities.as_mut(), part.velocities) {
            v.extend(pv);
        }
    }
    Ok(EmbeddedSeries {
        components,
        timestamps,
        dt,
        velocities,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::*;

    fn scalar(values: &[f64]) -> Dataset {
        let a = Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap();
        Dataset::new("z", 0, 1, a, None).unwrap()
    }

    #[test]
    fn window_two_rows() {
        let emb = embed(&scalar(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2).unwrap();
        assert_eq!(emb.len(), 4);
        assert_eq!(
            emb.components()[0].values,
            array![[2.0, 1.0], [3.0, 2.0], [4.0, 3.0], [5.0, 4.0]]
        );
        assert_eq!(emb.timestamps(), &[1, 2, 3, 4]);
    }

    #[test]
    fn unit_window_is_identity() {
        let ds = scalar(&[0.3, -1.0, 2.0]);
        let emb = embed(&ds, 1).unwrap();
        assert_eq!(&emb.components()[0].values, ds.values());
    }

    #[test]
    fn window_too_long() {
        assert!(embed(&scalar(&[1.0, 2.0]), 3).is_err());
        assert!(embed(&scalar(&[1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn embedded_dimension_matches_grid_times_window() {
        let ds = Dataset::new("sst", 0, 1, Array2::zeros((30, 6648)), None).unwrap();
        let emb = embed(&ds, 24).unwrap();
        assert_eq!(emb.dimension(), 159_552);
    }

    #[test]
    fn alternating_series_has_unit_velocity() {
        let z: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let emb = embed(&scalar(&z), 1).unwrap();
        let xi = phase_velocity(&emb);
        assert!(xi[0].iter().all(|&v| v == 1.0));
        let prepared = emb.with_velocities().unwrap();
        assert_eq!(prepared.len(), 9);
        assert_eq!(prepared.timestamps()[0], 1);
    }

    #[test]
    fn constant_series_is_floored_positive() {
        let emb = embed(&scalar(&[2.0; 8]), 3).unwrap();
        assert!(phase_velocity(&emb)[0].iter().all(|&v| v == 0.0));
        let prepared = emb.with_velocities().unwrap();
        assert!(prepared.velocities().unwrap()[0].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn join_singleton_is_identity() {
        let emb = embed(&scalar(&[1.0, 2.0, 4.0, 8.0]), 2).unwrap();
        assert_eq!(join(std::slice::from_ref(&emb)).unwrap(), emb);
    }

    #[test]
    fn join_equal_windows() {
        let a = Dataset::new("sst", 0, 1, Array2::zeros((100, 3)), None).unwrap();
        let b = Dataset::new("sic", 0, 1, Array2::ones((100, 2)), None).unwrap();
        let j = join(&[embed(&a, 24).unwrap(), embed(&b, 24).unwrap()]).unwrap();
        assert_eq!(j.len(), 100 - 23);
        assert_eq!(j.components().len(), 2);
    }

    #[test]
    fn join_rejects_disjoint() {
        let a = Dataset::new("a", 0, 1, Array2::zeros((10, 1)), None).unwrap();
        let b = Dataset::new("b", 100, 1, Array2::zeros((10, 1)), None).unwrap();
        assert!(join(&[embed(&a, 2).unwrap(), embed(&b, 2).unwrap()]).is_err());
    }

    #[test]
    fn unembed_restores_dataset() {
        let ds = Dataset::new(
            "z",
            0,
            1,
            Array2::from_shape_fn((12, 3), |(i, j)| (i * 3 + j) as f64),
            None,
        )
        .unwrap();
        let emb = embed(&ds, 4).unwrap();
        assert_eq!(&emb.unembed(0), ds.values());
    }
}

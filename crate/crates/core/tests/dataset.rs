use analogcast_core::dataset::{
    calendar_month, detrend_monthly, fit_monthly_trend, integrate, integrated_anomaly, load_dataset,
    monthly_climatology, synth_modulated_field, synth_regime_ar, Climatology, DataFormat, Dataset, GridLoading,
    ModulatedFieldSpec, RegimeArSpec, RegimeCoefficients, ScalarObservable, SwitchingFactor,
};
use ndarray::Array2;
use proptest::prelude::*;

fn series(values: Vec<f64>) -> ScalarObservable {
    let t = (0..values.len() as i64).collect();
    ScalarObservable::new(values, t).unwrap()
}

fn month_groups(values: &[f64], timestamps: &[i64]) -> Vec<Vec<(f64, f64)>> {
    let mut g = vec![Vec::new(); 12];
    for (&v, &t) in values.iter().zip(timestamps) {
        g[t.rem_euclid(12) as usize].push(((t.div_euclid(12)) as f64, v));
    }
    g
}

#[test]
fn climatology_matches_grouping_oracle() {
    let v: Vec<f64> = (0..24).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 12.0).sin() + 0.01 * t as f64).collect();
    let obs = series(v.clone());
    let clim = monthly_climatology(&obs).unwrap();
    for (m, g) in month_groups(&v, obs.timestamps()).iter().enumerate() {
        let mean = g.iter().map(|p| p.1).sum::<f64>() / g.len() as f64;
        assert!((clim.monthly_mean[m] - mean).abs() < 1e-14);
    }
}

#[test]
fn training_anomalies_average_to_zero_per_month() {
    let spec = ModulatedFieldSpec {
        n: 960,
        seed: 5,
        ..Default::default()
    };
    let data = synth_modulated_field(&spec).unwrap();
    let obs = integrate(&data).unwrap();
    let clim = monthly_climatology(&obs).unwrap();
    let anom = integrated_anomaly(&data, &clim).unwrap();
    for g in month_groups(anom.values(), anom.timestamps()) {
        let mean = g.iter().map(|p| p.1).sum::<f64>() / g.len() as f64;
        assert!(mean.abs() < 1e-12, "{mean}");
    }
}

#[test]
fn detrended_ramp_has_no_monthly_slope() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..180).map(|t| 0.02 * t as f64 + rng.random_range(-1.0..1.0)).collect();
    let out = detrend_monthly(&series(v)).unwrap();
    for g in month_groups(out.values(), out.timestamps()) {
        let n = g.len() as f64;
        let xm = g.iter().map(|p| p.0).sum::<f64>() / n;
        let ym = g.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = g.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
        let sxx: f64 = g.iter().map(|p| (p.0 - xm).powi(2)).sum();
        assert!((sxy / sxx).abs() < 1e-10);
    }
}

#[test]
fn regime_transition_counts_match() {
    let spec = RegimeArSpec {
        states: vec![
            RegimeCoefficients { mu: 0.0, a: 0.5, sigma: 1.0 },
            RegimeCoefficients { mu: 1.0, a: 0.5, sigma: 1.0 },
        ],
        transition: vec![vec![0.95, 0.05], vec![0.05, 0.95]],
        n: 50_000,
        x0: 0.0,
        initial_state: 0,
        seed: 11,
    };
    let (_, states) = synth_regime_ar(&spec).unwrap();
    let mut counts = [[0.0f64; 2]; 2];
    for w in states.windows(2) {
        counts[w[0]][w[1]] += 1.0;
    }
    for i in 0..2 {
        let total = counts[i][0] + counts[i][1];
        for j in 0..2 {
            assert!((counts[i][j] / total - spec.transition[i][j]).abs() < 0.01);
        }
    }
}

fn periodogram_peak(x: &[f64]) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut best = (0.0, 0.0);
    for k in 1..n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let a = 2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            re += (v - mean) * a.cos();
            im -= (v - mean) * a.sin();
        }
        let p = re * re + im * im;
        if p > best.1 {
            best = (k as f64 / n as f64, p);
        }
    }
    best.0
}

#[test]
fn low_frequency_factor_peaks_below_two_years() {
    let pure_lf = GridLoading {
        annual_gain: 0.0,
        annual_phase: 0.0,
        low_freq_gain: 1.0,
        intermittent_gain: 0.0,
        intermittent_phase: 0.0,
    };
    for switching in [None, Some(SwitchingFactor { drift: 0.02, band: 1.0, noise: 0.02 })] {
        let spec = ModulatedFieldSpec {
            d: 4,
            n: 1200,
            loadings: Some(vec![pure_lf; 4]),
            noise: 0.0,
            switching,
            seed: 2,
            ..Default::default()
        };
        let data = synth_modulated_field(&spec).unwrap();
        let col: Vec<f64> = data.values().column(0).to_vec();
        assert!(periodogram_peak(&col) < 1.0 / 24.0);
    }
}

#[test]
fn calendar_months_cycle() {
    let months: Vec<u8> = (-13..13).map(calendar_month).collect();
    assert_eq!(months[13], 1);
    assert_eq!(months[12], 12);
    assert_eq!(months[0], 12);
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..20, 1usize..6, -500i64..500, 1i64..4, any::<bool>()).prop_flat_map(|(n, d, epoch, dt, areas)| {
        (
            proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), n * d),
            proptest::collection::vec(0.0f64..10.0, d),
        )
            .prop_map(move |(v, a)| {
                let values = Array2::from_shape_vec((n, d), v).unwrap();
                Dataset::new("x", epoch, dt, values, areas.then_some(a)).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn binary_round_trip_is_bit_exact(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        analogcast_core::dataset::write_dataset(&path, DataFormat::RawBinary, &ds).unwrap();
        let back = load_dataset(&path, DataFormat::RawBinary).unwrap();
        prop_assert_eq!(back.timestamps(), ds.timestamps());
        prop_assert_eq!(back.cell_areas().map(|a| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>()),
            ds.cell_areas().map(|a| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
        let bits = |d: &Dataset| d.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&ds));
    }

    #[test]
    fn detrend_is_idempotent(v in proptest::collection::vec(-100.0f64..100.0, 36..120)) {
        let once = detrend_monthly(&series(v)).unwrap();
        let twice = detrend_monthly(&once).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn integrated_anomaly_is_linear(
        v1 in proptest::collection::vec(-5.0f64..5.0, 72),
        v2 in proptest::collection::vec(-5.0f64..5.0, 72),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        trend in any::<bool>(),
    ) {
        let areas = Some(vec![0.5, 1.0, 0.8]);
        let c1 = Dataset::new("c", 0, 1, Array2::from_shape_vec((24, 3), v1).unwrap(), areas.clone()).unwrap();
        let c2 = Dataset::new("c", 0, 1, Array2::from_shape_vec((24, 3), v2).unwrap(), areas.clone()).unwrap();
        let fit = |d: &Dataset| {
            let o = integrate(d).unwrap();
            if trend { fit_monthly_trend(&o).unwrap() } else { monthly_climatology(&o).unwrap() }
        };
        let (k1, k2) = (fit(&c1), fit(&c2));
        let combined = Climatology {
            monthly_mean: std::array::from_fn(|m| a * k1.monthly_mean[m] + b * k2.monthly_mean[m]),
            per_month_trend: k1.per_month_trend.zip(k2.per_month_trend).map(|(t1, t2)| {
                std::array::from_fn(|m| (a * t1[m].0 + b * t2[m].0, a * t1[m].1 + b * t2[m].1))
            }),
        };
        let mix = Dataset::new("c", 0, 1, a * c1.values() + b * c2.values(), areas).unwrap();
        let lhs = integrated_anomaly(&mix, &combined).unwrap();
        let r1 = integrated_anomaly(&c1, &k1).unwrap();
        let r2 = integrated_anomaly(&c2, &k2).unwrap();
        for i in 0..24 {
            let rhs = a * r1.values()[i] + b * r2.values()[i];
            prop_assert!((lhs.values()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn generators_are_pure(seed in any::<u64>()) {
        let spec = ModulatedFieldSpec { n: 120, d: 4, periods: vec![12.0], seed, ..Default::default() };
        prop_assert_eq!(synth_modulated_field(&spec).unwrap(), synth_modulated_field(&spec).unwrap());
        let ar = RegimeArSpec {
            states: vec![RegimeCoefficients { mu: 0.1, a: 0.7, sigma: 0.5 }],
            transition: vec![vec![1.0]],
            n: 50,
            x0: 0.0,
            initial_state: 0,
            seed,
        };
        prop_assert_eq!(synth_regime_ar(&ar).unwrap(), synth_regime_ar(&ar).unwrap());
    }
}

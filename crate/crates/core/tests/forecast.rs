use analogcast_core::dataset::{synth_modulated_field, Dataset, ModulatedFieldSpec};
use analogcast_core::embedding::{embed, EmbeddedSeries};
use analogcast_core::forecast::{
    keaf_gh, keaf_gh_audit, keaf_lp, keaf_lp_audit, rank_analogs, run_forecasts, shift, truncate_ensemble, Forecaster,
};
use analogcast_core::kernels::{build_matrix, KernelSpec};
use analogcast_core::laplacian::{decompose, InnerProduct};
use analogcast_core::metrics::{objective_truth, rmse_curve};
use analogcast_core::ose::{gh_fit, lp_fit, GhModel, LpModel};
use ndarray::Array2;
use proptest::prelude::*;
use std::sync::OnceLock;

struct Setup {
    train: EmbeddedSeries,
    test: EmbeddedSeries,
    gh: GhModel,
    lp: LpModel,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let spec = ModulatedFieldSpec {
            d: 4,
            n: 1000,
            seed: 4,
            ..Default::default()
        };
        let data = synth_modulated_field(&spec).unwrap();
        let train = embed(&data.slice(0, 300).unwrap(), 6).unwrap().with_velocities().unwrap();
        let test = embed(&data.slice(300, 420).unwrap(), 6).unwrap().with_velocities().unwrap();
        let f: Vec<f64> = (0..train.len()).map(|i| train.point(i).components[0][0]).collect();
        let kernel = KernelSpec::nlsa(4.0);
        let basis = decompose(&build_matrix(&train, &kernel).unwrap(), 12, InnerProduct::Degree).unwrap();
        let gh = gh_fit(&f, &basis, &train, &kernel, Some(8)).unwrap();
        let lp = lp_fit(&f, &train, &kernel, None, 24).unwrap();
        Setup { train, test, gh, lp }
    })
}

#[test]
fn mask_keeps_exactly_the_shiftable_samples() {
    let f: Vec<f64> = (0..20).map(f64::from).collect();
    for s in 0..20 {
        assert_eq!(shift(&f, s).unwrap().len(), 20 - s);
    }
    let s = setup();
    let n = s.train.len();
    let leads: Vec<i64> = vec![0, 3, 17];
    let run = run_forecasts(Forecaster::Lp(&s.lp), &s.test, &leads, None).unwrap();
    for (e, &lead) in run.excluded.iter().zip(&leads) {
        assert_eq!(e.count, lead as usize);
        assert_eq!(e.first + e.count, n);
    }
}

#[test]
fn truncation_keeps_top_weights() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let out = truncate_ensemble(&w, 3).unwrap();
        let mut idx: Vec<usize> = (0..12).collect();
        idx.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap());
        let mut support: Vec<usize> = (0..12).filter(|&k| out[k] > 0.0).collect();
        let mut top = idx[..3].to_vec();
        support.sort();
        top.sort();
        assert_eq!(support, top);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(&rank_analogs(&w)[..3], &idx[..3]);
    }
}

#[test]
fn narrow_bandwidth_recovers_classical_analog() {
    let s = setup();
    let f: Vec<f64> = s.lp.f.clone();
    let narrow = lp_fit(&f, &s.train, &KernelSpec::nlsa(1e-6), None, 12).unwrap();
    for j in [0usize, 40, 100, 250] {
        for tau in [0usize, 1, 7, 20] {
            if j + tau < s.train.len() {
                let y = s.train.point(j);
                assert!((keaf_lp(&narrow, &y, tau, s.train.len()).unwrap() - f[j + tau]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn persistence_on_white_noise() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    let n = 40_000;
    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ds = Dataset::new("w", 0, 1, Array2::from_shape_vec((n, 1), x.clone()).unwrap(), None).unwrap();
    let test = embed(&ds, 1).unwrap();
    let leads = [0i64, 1, 5];
    let run = run_forecasts(Forecaster::Persistence(&x), &test, &leads, None).unwrap();
    assert_eq!(run.predictions.dim(), (n, 3));
    let r = rmse_curve(&run, &objective_truth(&x, &leads, 1).unwrap()).unwrap();
    assert_eq!(r[0], 0.0);
    for v in &r[1..] {
        assert!((v - 2f64.sqrt()).abs() < 0.03, "{v}");
    }
}

#[test]
fn full_basis_reproduces_training_values() {
    let s = setup();
    let n = 120;
    let train = s.train.slice(0, n);
    let f: Vec<f64> = s.gh.f[..n].to_vec();
    let kernel = KernelSpec::nlsa(1e-3);
    let basis = decompose(&build_matrix(&train, &kernel).unwrap(), n, InnerProduct::Degree).unwrap();
    let m = gh_fit(&f, &basis, &train, &kernel, Some(n)).unwrap();
    for k in 0..n {
        assert!((keaf_gh(&m, &train.point(k), 0, n).unwrap() - f[k]).abs() < 1e-8);
    }
}

#[test]
fn runs_are_bit_identical() {
    let s = setup();
    let leads: Vec<i64> = (0..=12).collect();
    for fc in [Forecaster::Gh(&s.gh), Forecaster::Lp(&s.lp)] {
        let a = run_forecasts(fc, &s.test, &leads, Some(50)).unwrap();
        let b = run_forecasts(fc, &s.test, &leads, Some(50)).unwrap();
        let bits = |r: &analogcast_core::forecast::ForecastRun| r.predictions.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn predictions_are_convex_and_in_record(j in 0usize..100, tau in 0usize..60, nn in 1usize..280) {
        let s = setup();
        let n = s.train.len();
        let y = s.test.point(j);
        let nn = nn.min(n - tau);
        let g = keaf_gh_audit(&s.gh, &y, tau, nn).unwrap();
        let l = keaf_lp_audit(&s.lp, &y, tau, nn).unwrap();
        for a in [g, l] {
            let slack = 1e-12 * (1.0 + a.support_max.abs().max(a.support_min.abs()));
            prop_assert!(a.value >= a.support_min - slack && a.value <= a.support_max + slack);
            prop_assert!(a.max_index_read < n);
        }
    }
}

use analogcast_core::dataset::Dataset;
use analogcast_core::embedding::{embed, join, phase_velocity};
use ndarray::Array2;
use proptest::prelude::*;

fn dataset(name: &str, n: usize, d: usize, values: Vec<f64>) -> Dataset {
    Dataset::new(name, 0, 1, Array2::from_shape_vec((n, d), values).unwrap(), None).unwrap()
}

fn random_values(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn velocities_match_direct_norms() {
    let (n, d, q) = (60, 3, 5);
    let raw = random_values(n * d, 1);
    let emb = embed(&dataset("x", n, d, raw.clone()), q).unwrap();
    let xi = &phase_velocity(&emb)[0];
    assert_eq!(xi.len(), n - q);
    for (i, v) in xi.iter().enumerate() {
        let t = i + q;
        let mut s = 0.0;
        for lag in 0..q {
            for j in 0..d {
                let diff = raw[(t - lag) * d + j] - raw[(t - 1 - lag) * d + j];
                s += diff * diff;
            }
        }
        assert!((v - s.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn mixed_windows_align_on_lead_timestamps() {
    let n = 100;
    let sst = dataset("sst", n, 2, random_values(2 * n, 2));
    let sic = dataset("sic", n, 1, random_values(n, 3));
    let joined = join(&[embed(&sst, 24).unwrap(), embed(&sic, 6).unwrap()]).unwrap();
    assert_eq!(joined.len(), 77);
    assert_eq!(joined.timestamps()[0], 23);
    for i in 0..joined.len() {
        let lead = (i + 23) as usize;
        let p = joined.point(i);
        assert_eq!(p.components[0].len(), 48);
        assert_eq!(p.components[1].len(), 6);
        for lag in 0..6 {
            assert_eq!(p.components[1][lag], sic.values()[[lead - lag, 0]]);
        }
        assert_eq!(p.components[0][0], sst.values()[[lead, 0]]);
        assert_eq!(p.components[0][47], sst.values()[[lead - 23, 1]]);
    }
    let with_v = join(&[
        embed(&sst, 24).unwrap().with_velocities().unwrap(),
        embed(&sic, 6).unwrap().with_velocities().unwrap(),
    ])
    .unwrap();
    assert_eq!(with_v.len(), 76);
}

proptest! {
    #[test]
    fn unembed_restores_data(n in 1usize..30, d in 1usize..4, q in 1usize..8, seed in any::<u64>()) {
        prop_assume!(q <= n);
        let ds = dataset("x", n, d, random_values(n * d, seed));
        let emb = embed(&ds, q).unwrap();
        prop_assert_eq!(emb.unembed(0), ds.values().clone());
    }

    #[test]
    fn unit_window_velocity_is_first_difference(v in proptest::collection::vec(-10.0f64..10.0, 4..40)) {
        let n = v.len() / 2;
        let ds = dataset("x", n, 2, v[..2 * n].to_vec());
        let emb = embed(&ds, 1).unwrap();
        let xi = &phase_velocity(&emb)[0];
        for i in 1..n {
            let a = ds.values().row(i);
            let b = ds.values().row(i - 1);
            let direct = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            prop_assert!((xi[i - 1] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn join_is_associative(qa in 1usize..6, qb in 1usize..6, qc in 1usize..6, seed in any::<u64>(), vel in any::<bool>()) {
        let n = 30;
        let make = |name: &str, q: usize, s: u64| {
            let e = embed(&dataset(name, n, 2, random_values(2 * n, s)), q).unwrap();
            if vel { e.with_velocities().unwrap() } else { e }
        };
        let (a, b, c) = (make("a", qa, seed), make("b", qb, seed ^ 1), make("c", qc, seed ^ 2));
        let left = join(&[join(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
        let right = join(&[a.clone(), join(&[b.clone(), c.clone()]).unwrap()]).unwrap();
        let flat = join(&[a, b, c]).unwrap();
        prop_assert_eq!(&left, &flat);
        prop_assert_eq!(&right, &flat);
    }
}

use exitlim_core::dynamics::DriftFieldModel;
use exitlim_core::geometry::{Domain, Side};
use exitlim_core::limit::{build_limit_law, LimitLaw};
use exitlim_core::rng::make_stream;
use exitlim_core::stats::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn half_plane_law() -> LimitLaw {
    let dom = Domain::half_space(2, 0, 0.0, Side::Lower).unwrap();
    let b0bar = DriftFieldModel::constant(vec![-1.0, 0.5]).unwrap();
    build_limit_law(&b0bar, &DMatrix::identity(2, 2), &[0.1, 0.0], &dom, 1e-3, 10.0).unwrap()
}

fn ecdf(xs: &[f64], t: f64) -> f64 {
    xs.iter().filter(|&&x| x <= t).count() as f64 / xs.len() as f64
}

fn brute_two_sample(a: &[f64], b: &[f64]) -> f64 {
    a.iter().chain(b).map(|&t| (ecdf(a, t) - ecdf(b, t)).abs()).fold(0.0, f64::max)
}

fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

#[test]
fn ks_matches_brute_force_ecdf() {
    let fixtures: [(&[f64], &[f64]); 5] = [
        (&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5, 4.5]),
        (&[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0, 1.0, 1.0]),
        (&[5.0], &[-1.0, 0.0, 1.0]),
        (&[-2.0, -1.0, 0.5, 0.5, 3.0], &[-1.0, 0.5, 2.0]),
        (&[1.0, 2.0], &[3.0, 4.0, 5.0]),
    ];
    for (a, b) in fixtures {
        let d = two_sample_ks(a, b).unwrap().statistic;
        assert!((d - brute_two_sample(a, b)).abs() <= 1e-15, "{a:?} {b:?}");
    }
    assert_eq!(two_sample_ks(&[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap().statistic, 1.0);
    assert!(two_sample_ks(&[], &[1.0]).is_err());

    let mut rng = make_stream(3, 0);
    let xs: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
    let mut s = xs.clone();
    s.sort_by(f64::total_cmp);
    let brute = s
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / 200.0 - normal_cdf(x)).max(normal_cdf(x) - i as f64 / 200.0))
        .fold(0.0, f64::max);
    assert!((one_sample_ks(&xs, normal_cdf).statistic - brute).abs() <= 1e-15);
}

#[test]
fn two_sample_null_and_separation() {
    let draw = |seed: u64, idx: u64, shift: f64| -> Vec<f64> {
        let mut r = make_stream(seed, idx);
        (0..5000).map(|_| r.normal() + shift).collect()
    };
    let null = two_sample_ks(&draw(11, 0, 0.0), &draw(11, 1, 0.0)).unwrap();
    assert!(null.p > 1e-3, "{null:?}");
    let sep = two_sample_ks(&draw(11, 0, 0.0), &draw(11, 1, 1.0)).unwrap();
    assert!(sep.p <= 1e-6, "{sep:?}");
}

#[test]
fn self_tests_over_ten_seeds() {
    let law = half_plane_law();
    let seeds: Vec<u64> = (1..=10).collect();
    let rep = self_tests(&law.sigma_limit, &seeds).unwrap();
    assert_eq!(rep.outcomes.len(), 10);
    assert!(rep.pass, "{rep:?}");
    assert_eq!(rep.power_failures, 0);
    assert!(rep.null_failures <= 1);
    assert!(rep.outcomes.iter().all(|o| o.ks_separation_pass && o.power_min_z >= 10.0));
}

#[test]
fn comparison_flags_a_wrong_covariance() {
    let law = half_plane_law();
    let chol = (&law.sigma_limit * 1.5).cholesky().unwrap().l();
    let mut rng = make_stream(5, 0);
    let xs: Vec<Vec<f64>> = (0..20000)
        .map(|_| {
            let g = nalgebra::DVector::from_fn(2, |_, _| rng.normal());
            (&chol * g).iter().copied().collect()
        })
        .collect();
    let rep = gaussian_comparison_vectors(&xs, &law.sigma_limit, &Thresholds::default()).unwrap();
    assert!(!rep.pass && !rep.pass_cov);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rescale_round_trip(u in -50.0f64..50.0, w in -50.0f64..50.0, eps in 1e-3f64..1.0) {
        let law = half_plane_law();
        let s = RescaledSample { u, w: vec![w] };
        let (tau, x) = unrescale(&s, &law, eps);
        let back = rescale_one(tau, &x, &law, eps).unwrap();
        prop_assert!((back.u - u).abs() <= 1e-12 * (1.0 + u.abs()) / eps);
        prop_assert!((back.w[0] - w).abs() <= 1e-12 * (1.0 + w.abs()) / eps);
    }

    #[test]
    fn off_plane_exit_is_rejected(off in 1e-6f64..1.0) {
        let law = half_plane_law();
        prop_assert!(rescale_one(0.1, &[off, 0.05], &law, 0.1).is_err());
    }

    #[test]
    fn comparison_is_order_invariant(seed in 0u64..1000, rot in 1usize..500) {
        let law = half_plane_law();
        let chol = law.sigma_limit.clone().cholesky().unwrap().l();
        let mut rng = make_stream(seed, 0);
        let mut xs: Vec<Vec<f64>> = (0..600)
            .map(|_| {
                let g = nalgebra::DVector::from_fn(2, |_, _| rng.normal());
                (&chol * g).iter().copied().collect()
            })
            .collect();
        let a = gaussian_comparison_vectors(&xs, &law.sigma_limit, &Thresholds::default()).unwrap();
        xs.rotate_left(rot);
        xs.reverse();
        let b = gaussian_comparison_vectors(&xs, &law.sigma_limit, &Thresholds::default()).unwrap();
        prop_assert_eq!(a.pass, b.pass);
        prop_assert!((a.cov_z.clone() - b.cov_z.clone()).abs().max() <= 1e-9);
        prop_assert!((a.ks_mahalanobis.statistic - b.ks_mahalanobis.statistic).abs() <= 1e-15);
    }

    #[test]
    fn two_sample_ks_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 1..40), b in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let ab = two_sample_ks(&a, &b).unwrap();
        let ba = two_sample_ks(&b, &a).unwrap();
        prop_assert_eq!(ab.statistic, ba.statistic);
        prop_assert!((ab.statistic - brute_two_sample(&a, &b)).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }
}

use exitlim_core::conditioning::*;
use exitlim_core::dynamics::{DriftFieldModel, VectorField};
use exitlim_core::elliptic::{solve_h_eps, SolveOptions};
use exitlim_core::geometry::{Domain, Face, Side};
use exitlim_core::sim::SimConfig;
use exitlim_core::stats::two_sample_ks;
use exitlim_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn half_plane() -> Domain {
    Domain::half_space(2, 0, 0.0, Side::Lower).unwrap()
}

fn strip() -> Domain {
    Domain::boxed(vec![0.0, -5.0], vec![0.5, 5.0], Face::new(0, Side::Lower)).unwrap()
}

proptest! {
    #[test]
    fn half_plane_conditioning_reflects_the_normal_drift(
        x in (0.0f64..3.0, -3.0f64..3.0),
        eps_i in 0usize..4,
        b1 in 0.1f64..3.0,
        b2 in -2.0f64..2.0,
    ) {
        let eps = [0.5, 0.25, 0.1, 0.05][eps_i];
        let h = HalfPlaneH::new(&[b1, b2], &half_plane(), eps, 1.0).unwrap();
        let b = DriftFieldModel::constant(vec![b1, b2]).unwrap();
        let d = h_transform_drift(&b, DMatrix::identity(2, 2), &h, eps).unwrap();
        let mut out = [0.0; 2];
        d.eval(&[x.0, x.1], &mut out).unwrap();
        prop_assert!((out[0] + b1).abs() <= 1e-12 * (1.0 + b1));
        prop_assert!((out[1] - b2).abs() <= 1e-12);
    }
}

#[test]
fn rejection_rate_estimates_h() {
    let eps: f64 = 0.25;
    let b = DriftFieldModel::constant(vec![1.0, 0.5]).unwrap();
    let k = 2.0 / (eps * eps);
    let exact = ((-k * 0.1).exp() - (-k * 0.5).exp()) / (1.0 - (-k * 0.5).exp());
    let n = 20_000;
    let err = rejection_sample(&b, &SimConfig::new(eps, 1e-3, 5.0), &[0.1, 0.0], &strip(), u64::MAX, n, 3).unwrap_err();
    let Error::AcceptanceTooLow { batch, attempted, .. } = err else { panic!("expected exhaustion") };
    assert_eq!(attempted, n);
    let rate = batch.acceptance_rate();
    let se = (exact * (1.0 - exact) / n as f64).sqrt();
    assert!((rate - exact).abs() <= 4.0 * se, "rate {rate} exact {exact}");
}

#[test]
fn drift_toward_gamma_is_mostly_accepted() {
    let b = DriftFieldModel::constant(vec![-1.0, 0.0]).unwrap();
    let batch = rejection_sample(&b, &SimConfig::new(0.3, 1e-3, 5.0), &[0.2, 0.0], &strip(), 500, 10_000, 1).unwrap();
    assert!(batch.acceptance_rate() >= 0.5);
    assert!(batch.accepted_samples().all(|s| s.exited_through(batch.gamma) && !s.truncated));
}

#[test]
fn analytic_h_sampler_never_misses() {
    let b = DriftFieldModel::constant(vec![1.0, 0.5]).unwrap();
    let h = HalfPlaneH::new(&[1.0, 0.5], &half_plane(), 0.1, 1.0).unwrap();
    let batch = conditioned_sample_via_h(
        &b,
        &DMatrix::identity(2, 2),
        &h,
        &SimConfig::new(0.1, 1e-3, 5.0),
        &[0.1, 0.0],
        &half_plane(),
        10_000,
        9,
    )
    .unwrap();
    assert_eq!(batch.anomalies, 0);
    assert_eq!(batch.acceptance_rate(), 1.0);
}

#[test]
fn h_transform_and_rejection_agree_in_law() {
    let eps = 0.25;
    let b = DriftFieldModel::constant(vec![1.0, 0.5]).unwrap();
    let cfg = SimConfig::new(eps, 1e-3, 5.0);
    let n = 1500;
    let rej = rejection_sample(&b, &cfg, &[0.1, 0.0], &strip(), n, 200_000, 21).unwrap();
    let h = HalfPlaneH::new(&[1.0, 0.5], &half_plane(), eps, 1.0).unwrap();
    let via = conditioned_sample_via_h(&b, &DMatrix::identity(2, 2), &h, &cfg, &[0.1, 0.0], &strip(), n, 22).unwrap();
    assert!(two_sample_ks(&rej.exit_coordinate(1), &via.exit_coordinate(1)).unwrap().p >= 1e-3);
    assert!(two_sample_ks(&rej.exit_times(), &via.exit_times()).unwrap().p >= 1e-3);
}

#[test]
fn grid_h_drift_matches_one_dimensional_oracle() {
    let eps = 0.3;
    let b = DriftFieldModel::constant(vec![1.0, 0.0]).unwrap();
    // Side faces sit one unit away from the region so their absorption is negligible.
    let dom = Domain::boxed(vec![0.0, -1.0], vec![1.0, 2.0], Face::new(0, Side::Lower)).unwrap();
    let (grid, _) = solve_h_eps(&b, eps, &dom, &[201, 301], &SolveOptions::default()).unwrap();
    let h = GridHField::new(grid).unwrap();
    let d = h_transform_drift(&b, DMatrix::identity(2, 2), &h, eps).unwrap();
    let mut out = [0.0; 2];
    for i in 0..=10 {
        for j in 0..=8 {
            let x = [0.05 + 0.025 * i as f64, 0.3 + 0.05 * j as f64];
            d.eval(&x, &mut out).unwrap();
            assert!((out[0] + 1.0).abs() <= 0.02 && out[1].abs() <= 0.02, "{x:?} → {out:?}");
        }
    }
}

#[test]
fn kernel_ratio_identity_holds() {
    let eps = 0.25;
    let b = DriftFieldModel::constant(vec![1.0, 0.5]).unwrap();
    let h = HalfPlaneH::new(&[1.0, 0.5], &half_plane(), eps, 1.0).unwrap();
    let cfg = SimConfig::new(eps, 1e-3, 1.0);
    let r = kernel_ratio_check(&b, &h, &cfg, &[0.1, 0.0], &half_plane(), 0.02, 20_000, 4).unwrap();
    assert!(r.max_abs_z <= 4.0, "max |z| {}", r.max_abs_z);

    // Every path reaches Γ, so h ≡ 1 is the exit probability.
    let toward = DriftFieldModel::constant(vec![-1.0, 0.5]).unwrap();
    let one = ConstantH { dim: 2, value: 1.0 };
    let r = kernel_ratio_check(&toward, &one, &cfg, &[0.1, 0.0], &half_plane(), 0.02, 500, 4).unwrap();
    assert_eq!(r.accepted, 500);
    assert_eq!(r.mean_weight, 1.0);
    assert!(r.ks.iter().all(|&d| d <= 1e-12));

    let r = kernel_ratio_check(&b, &h, &cfg, &[0.1, 0.0], &half_plane(), 0.0, 2_000, 4).unwrap();
    assert!(r.ks.iter().all(|&d| d <= 1e-12));
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let b = DriftFieldModel::constant(vec![1.0, 0.5]).unwrap();
    let cfg = SimConfig::new(0.3, 1e-3, 2.0);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| rejection_sample(&b, &cfg, &[0.1, 0.0], &strip(), 200, 100_000, 77).unwrap())
    };
    let (a, c) = (run(1), run(4));
    assert_eq!(a.attempted, c.attempted);
    assert_eq!(a.exit_times(), c.exit_times());
    assert_eq!(a.exit_coordinate(1), c.exit_coordinate(1));
}

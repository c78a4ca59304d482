use exitlim_core::dynamics::{DriftFieldModel, VectorField};
use exitlim_core::elliptic::*;
use exitlim_core::geometry::{Domain, Face, Side};
use proptest::prelude::*;

fn exact_1d(x: f64, eps: f64, b: f64, len: f64) -> f64 {
    let k = 2.0 * b / (eps * eps);
    ((-k * x).exp() - (-k * len).exp()) / (1.0 - (-k * len).exp())
}

fn interval(len: f64) -> Domain {
    Domain::boxed(vec![0.0], vec![len], Face::new(0, Side::Lower)).unwrap()
}

fn max_rel_err_1d(nodes: usize, eps: f64) -> f64 {
    let b = DriftFieldModel::constant(vec![1.0]).unwrap();
    let (h, _) = solve_h_eps(&b, eps, &interval(1.0), &[nodes], &SolveOptions::default()).unwrap();
    (0..h.len())
        .filter_map(|k| {
            let e = exact_1d(h.coords(k)[0], eps, 1.0, 1.0);
            (e >= 1e-12).then(|| (h.values[k] - e).abs() / e)
        })
        .fold(0.0, f64::max)
}

/// Re-applies the hybrid stencil to `h` and returns the diagonal-scaled max residual.
fn independent_residual(b: &dyn VectorField, eps: f64, h: &GridField) -> f64 {
    let e2 = eps * eps;
    let (nx, ny) = (h.shape[0], h.shape[1]);
    let (dx, dy) = (h.spacing(0), h.spacing(1));
    let at = |i: usize, j: usize| h.values[j * nx + i];
    let mut worst: f64 = 0.0;
    let mut bx = [0.0; 2];
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            b.eval(&h.coords(j * nx + i), &mut bx).unwrap();
            let mut diag = 0.0;
            let mut acc = 0.0;
            for (a, d, lo, hi) in [(0, dx, at(i - 1, j), at(i + 1, j)), (1, dy, at(i, j - 1), at(i, j + 1))] {
                let diff = 0.5 * e2 / (d * d);
                let (w, e) = if bx[a].abs() * d <= e2 {
                    (diff - bx[a] / (2.0 * d), diff + bx[a] / (2.0 * d))
                } else if bx[a] > 0.0 {
                    (diff, diff + bx[a] / d)
                } else {
                    (diff - bx[a] / d, diff)
                };
                acc += w * lo + e * hi;
                diag -= w + e;
            }
            worst = worst.max(((acc + diag * at(i, j)) / diag).abs());
        }
    }
    worst
}

#[test]
fn one_dimensional_oracle_and_refinement() {
    let fine = max_rel_err_1d(2049, 0.3);
    let coarse = max_rel_err_1d(1025, 0.3);
    assert!(fine <= 1e-3, "{fine}");
    assert!(coarse / fine >= 1.8, "centred ratio {}", coarse / fine);
}

#[test]
fn upwind_regime_still_converges() {
    let b = DriftFieldModel::constant(vec![1.0]).unwrap();
    let eps: f64 = 0.05;
    let err = |nodes: usize| {
        let (h, rep) = solve_h_eps(&b, eps, &interval(1.0), &[nodes], &SolveOptions::default()).unwrap();
        assert!(rep.upwind_count > 0);
        (0..h.len())
            .filter_map(|k| {
                let x = h.coords(k)[0];
                let e = exact_1d(x, eps, 1.0, 1.0);
                (x <= 0.05 && e >= 1e-12).then(|| (h.values[k] - e).abs() / e)
            })
            .fold(0.0, f64::max)
    };
    let ratio = err(129) / err(257);
    assert!(ratio >= 1.4, "upwind ratio {ratio}");
}

#[test]
fn box_midline_matches_one_dimensional_solution() {
    let eps = 0.3;
    let b = DriftFieldModel::constant(vec![1.0, 0.0]).unwrap();
    let dom = Domain::boxed(vec![0.0, 0.0], vec![1.0, 1.0], Face::new(0, Side::Lower)).unwrap();
    let (h, _) = solve_h_eps(&b, eps, &dom, &[401, 201], &SolveOptions::default()).unwrap();
    for i in 1..=60 {
        let x = [i as f64 * 0.005, 0.5];
        let e = exact_1d(x[0], eps, 1.0, 1.0);
        let v = h.sample(&x).unwrap();
        assert!((v - e).abs() / e <= 0.02, "{x:?}: {v} vs {e}");
    }
}

#[test]
fn reported_residual_is_reproducible() {
    let b = DriftFieldModel::quadratic_shear(1.0, 0.2, 0.3);
    let dom = Domain::boxed(vec![0.0, 0.0], vec![1.0, 1.0], Face::new(0, Side::Lower)).unwrap();
    for (eps, shape) in [(0.4, [81, 41]), (0.05, [41, 41])] {
        let (h, rep) = solve_h_eps(&b, eps, &dom, &shape, &SolveOptions::default()).unwrap();
        assert!((independent_residual(&b, eps, &h) - rep.residual).abs() <= 1e-14);
        assert!(rep.residual <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn discrete_maximum_principle(
        c in prop::collection::vec(-2.0f64..2.0, 2),
        m in prop::collection::vec(-1.0f64..1.0, 4),
        eps in 0.1f64..1.0,
        nx in 5usize..40,
        ny in 5usize..40,
        gamma_axis in 0usize..2,
        upper in any::<bool>(),
    ) {
        let b = DriftFieldModel::affine(vec![vec![m[0], m[1]], vec![m[2], m[3]]], c).unwrap();
        let side = if upper { Side::Upper } else { Side::Lower };
        let dom = Domain::boxed(vec![0.0, 0.0], vec![1.0, 1.0], Face::new(gamma_axis, side)).unwrap();
        match solve_h_eps(&b, eps, &dom, &[nx, ny], &SolveOptions::default()) {
            Ok((h, rep)) => {
                for k in 0..h.len() {
                    if !h.is_boundary_node(k) {
                        prop_assert!(h.values[k] > 0.0 && h.values[k] < 1.0, "node {k}: {}", h.values[k]);
                    }
                }
                prop_assert!(rep.h_min > 0.0 && rep.h_max < 1.0);
            }
            Err(exitlim_core::Error::Underflow { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}

#[test]
fn constant_drift_expansion_is_exact_up_to_discretisation() {
    let dom = interval(3.0);
    let b = DriftFieldModel::constant(vec![1.0]).unwrap();
    let reference = ConstantDriftReference::new(&[1.0], &dom).unwrap();
    let region = |x: &[f64]| (0.05 - 1e-9..=0.25 + 1e-9).contains(&x[0]);
    for eps in [0.4, 0.3, 0.2] {
        let (hc, _) = solve_h_eps(&b, eps, &dom, &[1201], &SolveOptions::default()).unwrap();
        let (hf, _) = solve_h_eps(&b, eps, &dom, &[2401], &SolveOptions::default()).unwrap();
        let (vc, vf) = (hopf_cole(&hc, eps), hopf_cole(&hf, eps));
        let mut estimate: f64 = 0.0;
        for k in 0..vc.len() {
            if region(&vc.coords(k)) {
                estimate = estimate.max((vf.values[2 * k] - vc.values[k]).abs() / (3.0 * eps * eps));
            }
        }
        let vr = richardson(&vc, &vf, 2).unwrap();
        let row = &expansion_check(&[(eps, vr)], &reference, &region).unwrap()[0];
        assert!(row.r0 <= estimate, "eps {eps}: r0 {} vs {estimate}", row.r0);
    }
    assert!(expansion_check(&[], &reference, &region).unwrap().is_empty());
}

#[test]
fn linear_normal_drift_expansion_residual_shrinks() {
    // b = 1 + κx: v⁰ = 2(x + κx²/2), v₁ = ln(1 + κx).
    struct Exact(f64);
    impl ExpansionReference for Exact {
        fn v0(&self, x: &[f64]) -> exitlim_core::Result<f64> {
            Ok(2.0 * (x[0] + 0.5 * self.0 * x[0] * x[0]))
        }
        fn dv0(&self, x: &[f64]) -> exitlim_core::Result<Vec<f64>> {
            Ok(vec![2.0 * (1.0 + self.0 * x[0])])
        }
        fn v1(&self, x: &[f64]) -> exitlim_core::Result<f64> {
            Ok((1.0 + self.0 * x[0]).ln())
        }
        fn dv1(&self, x: &[f64]) -> exitlim_core::Result<Vec<f64>> {
            Ok(vec![self.0 / (1.0 + self.0 * x[0])])
        }
    }
    let kappa = 0.5;
    let dom = interval(2.0);
    let b = DriftFieldModel::affine(vec![vec![kappa]], vec![1.0]).unwrap();
    let region = |x: &[f64]| (0.05 - 1e-9..=0.25 + 1e-9).contains(&x[0]);
    let mut fields = Vec::new();
    for eps in [0.4, 0.3, 0.2, 0.1] {
        let (hc, _) = solve_h_eps(&b, eps, &dom, &[1601], &SolveOptions::default()).unwrap();
        let (hf, _) = solve_h_eps(&b, eps, &dom, &[3201], &SolveOptions::default()).unwrap();
        fields.push((eps, richardson(&hopf_cole(&hc, eps), &hopf_cole(&hf, eps), 2).unwrap()));
    }
    let rows = expansion_check(&fields, &Exact(kappa), &region).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].r0 < w[0].r0 && w[1].r1 < w[0].r1, "{rows:?}");
    }
}

#[test]
fn field_csv_layout() {
    let f = GridField::from_fn(vec![0.0, 0.0], vec![1.0, 2.0], vec![3, 3], |x| x[0] + x[1]).unwrap();
    let mut buf = Vec::new();
    f.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "i,j,x1,x2,value,valid");
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[9], "2,2,1,2,3,1");
}

//! Rescaling of exit samples and comparison with the predicted Gaussian law.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::conditioning::ConditionedBatch;
use crate::error::{Error, Result};
use crate::limit::{mat_rows, LimitLaw};

/// Exit points farther than this from the Γ plane are malformed.
pub const PLANE_TOL: f64 = 1e-9;

pub const JACKKNIFE_BLOCKS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaledSample {
    /// `(τ − T)/ε`.
    pub u: f64,
    /// Tangential coordinates of `(X(τ) − z)/ε`.
    pub w: Vec<f64>,
}

impl RescaledSample {
    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.u).chain(self.w.iter().copied()).collect()
    }
}

pub fn rescale_one(tau: f64, exit: &[f64], law: &LimitLaw, eps: f64) -> Result<RescaledSample> {
    if exit.len() != law.dim() {
        return Err(Error::DimensionMismatch { expected: law.dim(), got: exit.len() });
    }
    let d: Vec<f64> = exit.iter().zip(&law.z).map(|(x, z)| x - z).collect();
    let normal: f64 = d.iter().zip(&law.normal).map(|(a, b)| a * b).sum();
    if !(normal.abs() <= PLANE_TOL) {
        return Err(Error::MalformedExitPoint { point: exit.to_vec() });
    }
    let w = law
        .basis
        .iter()
        .map(|t| t.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / eps)
        .collect();
    Ok(RescaledSample { u: (tau - law.t_exit) / eps, w })
}

/// Inverse of [`rescale_one`].
pub fn unrescale(s: &RescaledSample, law: &LimitLaw, eps: f64) -> (f64, Vec<f64>) {
    let mut x = law.z.clone();
    for (t, w) in law.basis.iter().zip(&s.w) {
        for (xi, ti) in x.iter_mut().zip(t) {
            *xi += eps * w * ti;
        }
    }
    (law.t_exit + eps * s.u, x)
}

/// Rescales every accepted sample of the batch, in trial order.
pub fn rescale(batch: &ConditionedBatch, law: &LimitLaw) -> Result<Vec<RescaledSample>> {
    batch
        .accepted_samples()
        .map(|s| match (s.tau, s.exit_point.as_ref()) {
            (Some(tau), Some(x)) if s.face == Some(batch.gamma) => rescale_one(tau, x, law, batch.eps),
            _ => Err(Error::MalformedExitPoint { point: s.exit_point.clone().unwrap_or_default() }),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub z_max: f64,
    pub ks_p_min: f64,
    pub mahalanobis_p_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { z_max: 4.0, ks_p_min: 1e-3, mahalanobis_p_min: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n: usize,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub mean_z: Vec<f64>,
    #[serde(with = "mat_rows")]
    pub cov: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub cov_se: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub cov_z: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub predicted: DMatrix<f64>,
    pub ks_marginals: Vec<KsResult>,
    pub ks_mahalanobis: KsResult,
    pub thresholds: Thresholds,
    pub pass_cov: bool,
    pub pass_marginals: bool,
    pub pass_mahalanobis: bool,
    pub pass: bool,
}

impl ComparisonReport {
    pub fn max_abs_cov_z(&self) -> f64 {
        self.cov_z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Kolmogorov distribution tail `P(K > λ)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if !(lambda > 0.0) {
        return 1.0;
    }
    if lambda < 1.18 {
        // Theta-function form, accurate where the alternating series is slow.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=100)
            .map(|k| {
                let m = (2 * k - 1) as f64;
                (-m * m * c).exp()
            })
            .sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut q = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        q += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * q).clamp(0.0, 1.0)
}

/// One-sample KS statistic `sup |F_n − F|` and asymptotic p-value.
pub fn one_sample_ks(xs: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    KsResult { statistic: d, p: kolmogorov_q(n.sqrt() * d) }
}

/// Two-sample KS statistic and asymptotic p-value.
pub fn two_sample_ks(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientSamples { required: 1, got: 0 });
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] == v {
            i += 1;
        }
        while j < m && y[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let p = if d == 0.0 { 1.0 } else { kolmogorov_q(ne.sqrt() * d) };
    Ok(KsResult { statistic: d, p })
}

/// Order-independent block label derived from the sample's bits.
fn block_of(x: &[f64]) -> usize {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for v in x {
        h ^= v.to_bits();
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    (h % JACKKNIFE_BLOCKS as u64) as usize
}

fn covariance_from_sums(s1: &DVector<f64>, s2: &DMatrix<f64>, n: f64) -> DMatrix<f64> {
    let mean = s1 / n;
    (s2 - &mean * mean.transpose() * n) / (n - 1.0)
}

/// Compares zero-mean vectors against `N(0, sigma)`.
pub fn gaussian_comparison_vectors(xs: &[Vec<f64>], sigma: &DMatrix<f64>, th: &Thresholds) -> Result<ComparisonReport> {
    let n = xs.len();
    if n < 100 {
        return Err(Error::InsufficientSamples { required: 100, got: n });
    }
    let d = sigma.nrows();
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: xs[0].len() });
    }
    let eig = sigma.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if !(min_eig >= 1e-12) {
        return Err(Error::DegeneratePrediction { min_eigenvalue: min_eig });
    }

    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    let mut b1 = vec![DVector::zeros(d); JACKKNIFE_BLOCKS];
    let mut b2 = vec![DMatrix::zeros(d, d); JACKKNIFE_BLOCKS];
    let mut bn = [0usize; JACKKNIFE_BLOCKS];
    for x in xs {
        let v = DVector::from_column_slice(x);
        let vv = &v * v.transpose();
        let b = block_of(x);
        b1[b] += &v;
        b2[b] += &vv;
        bn[b] += 1;
    }
    for b in 0..JACKKNIFE_BLOCKS {
        s1 += &b1[b];
        s2 += &b2[b];
    }
    let nf = n as f64;
    let mean = &s1 / nf;
    let cov = covariance_from_sums(&s1, &s2, nf);

    let used: Vec<usize> = (0..JACKKNIFE_BLOCKS).filter(|&b| bn[b] > 0).collect();
    let g = used.len() as f64;
    let loo: Vec<DMatrix<f64>> = used
        .iter()
        .map(|&b| covariance_from_sums(&(&s1 - &b1[b]), &(&s2 - &b2[b]), nf - bn[b] as f64))
        .collect();
    let loo_mean = loo.iter().fold(DMatrix::zeros(d, d), |acc, m| acc + m) / g;
    let cov_var = loo.iter().fold(DMatrix::zeros(d, d), |acc, m| {
        let e = m - &loo_mean;
        acc + e.component_mul(&e)
    }) * ((g - 1.0) / g);
    let cov_se = cov_var.map(f64::sqrt);
    let cov_z = DMatrix::from_fn(d, d, |i, j| (cov[(i, j)] - sigma[(i, j)]) / cov_se[(i, j)]);

    let mean_se: Vec<f64> = (0..d).map(|k| (cov[(k, k)] / nf).sqrt()).collect();
    let mean_z: Vec<f64> = (0..d).map(|k| mean[k] / mean_se[k]).collect();

    let ks_marginals: Vec<KsResult> = (0..d)
        .map(|k| {
            let col: Vec<f64> = xs.iter().map(|x| x[k]).collect();
            let normal = Normal::new(0.0, sigma[(k, k)].sqrt()).expect("positive variance");
            one_sample_ks(&col, |x| normal.cdf(x))
        })
        .collect();

    let inv = sigma.clone().cholesky().ok_or(Error::DegeneratePrediction { min_eigenvalue: min_eig })?;
    let m2: Vec<f64> = xs
        .iter()
        .map(|x| {
            let v = DVector::from_column_slice(x);
            v.dot(&inv.solve(&v))
        })
        .collect();
    let chi2 = ChiSquared::new(d as f64).expect("positive dof");
    let ks_mahalanobis = one_sample_ks(&m2, |x| chi2.cdf(x));

    let pass_cov = cov_z.iter().all(|z| z.abs() <= th.z_max);
    let pass_marginals = ks_marginals.iter().all(|k| k.p >= th.ks_p_min);
    let pass_mahalanobis = ks_mahalanobis.p >= th.mahalanobis_p_min;
    Ok(ComparisonReport {
        n,
        mean: mean.iter().copied().collect(),
        mean_se,
        mean_z,
        cov,
        cov_se,
        cov_z,
        predicted: sigma.clone(),
        ks_marginals,
        ks_mahalanobis,
        thresholds: *th,
        pass_cov,
        pass_marginals,
        pass_mahalanobis,
        pass: pass_cov && pass_marginals && pass_mahalanobis,
    })
}

pub fn gaussian_comparison(samples: &[RescaledSample], law: &LimitLaw, th: &Thresholds) -> Result<ComparisonReport> {
    let xs: Vec<Vec<f64>> = samples.iter().map(RescaledSample::to_vec).collect();
    gaussian_comparison_vectors(&xs, &law.sigma_limit, th)
}

/// Outcome of the statistical self-tests under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTestOutcome {
    pub seed: u64,
    /// Gaussian comparison of `N(0, Σ)` draws against `Σ`.
    pub calibration_max_z: f64,
    pub calibration_pass: bool,
    /// Smallest `|z|` over nonzero entries when the draws come from `N(0, 2Σ)`.
    pub power_min_z: f64,
    pub power_pass: bool,
    pub ks_null_p: f64,
    pub ks_null_pass: bool,
    pub ks_separation_p: f64,
    pub ks_separation_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub outcomes: Vec<SelfTestOutcome>,
    /// Seeds on which a null test (calibration or two-sample KS) rejected.
    pub null_failures: usize,
    /// Seeds on which a power test (2Σ or shifted KS) failed to reject.
    pub power_failures: usize,
    pub pass: bool,
}

pub const CALIBRATION_N: usize = 100_000;
pub const POWER_N: usize = 10_000;
pub const KS_N: usize = 5_000;

fn gaussian_draws(sigma: &DMatrix<f64>, n: usize, seed: u64, index: u64) -> Result<Vec<Vec<f64>>> {
    let d = sigma.nrows();
    let l = sigma
        .clone()
        .cholesky()
        .ok_or(Error::DegeneratePrediction { min_eigenvalue: sigma.clone().symmetric_eigen().eigenvalues.min() })?
        .l();
    let mut rng = crate::rng::make_stream(seed, index);
    let mut z = vec![0.0; d];
    Ok((0..n)
        .map(|_| {
            rng.fill_normal(&mut z);
            (&l * DVector::from_column_slice(&z)).iter().copied().collect()
        })
        .collect())
}

/// Null calibration and power checks of [`gaussian_comparison_vectors`] and
/// [`two_sample_ks`] under each seed. Passes when at most one seed shows a
/// null rejection and every power check rejects.
pub fn self_tests(sigma: &DMatrix<f64>, seeds: &[u64]) -> Result<SelfTestReport> {
    let th = Thresholds::default();
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cal = gaussian_comparison_vectors(&gaussian_draws(sigma, CALIBRATION_N, seed, 0)?, sigma, &th)?;
        let pow = gaussian_comparison_vectors(&gaussian_draws(&(sigma * 2.0), POWER_N, seed, 1)?, sigma, &th)?;
        let power_min_z = sigma
            .iter()
            .zip(pow.cov_z.iter())
            .filter(|(s, _)| s.abs() > 1e-12)
            .fold(f64::INFINITY, |m, (_, z)| m.min(z.abs()));
        let draw = |index: u64, shift: f64| {
            let mut rng = crate::rng::make_stream(seed, index);
            (0..KS_N).map(|_| rng.normal() + shift).collect::<Vec<f64>>()
        };
        let null = two_sample_ks(&draw(2, 0.0), &draw(3, 0.0))?;
        let sep = two_sample_ks(&draw(4, 0.0), &draw(5, 1.0))?;
        outcomes.push(SelfTestOutcome {
            seed,
            calibration_max_z: cal.max_abs_cov_z(),
            calibration_pass: cal.pass,
            power_min_z,
            power_pass: power_min_z >= 10.0,
            ks_null_p: null.p,
            ks_null_pass: null.p >= th.ks_p_min,
            ks_separation_p: sep.p,
            ks_separation_pass: sep.p <= 1e-6,
        });
    }
    let null_failures = outcomes.iter().filter(|o| !(o.calibration_pass && o.ks_null_pass)).count();
    let power_failures = outcomes.iter().filter(|o| !(o.power_pass && o.ks_separation_pass)).count();
    Ok(SelfTestReport { outcomes, null_failures, power_failures, pass: null_failures <= 1 && power_failures == 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn law() -> LimitLaw {
        LimitLaw {
            t_exit: 0.1,
            z: vec![0.0, 0.05],
            b0bar_z: vec![-1.0, 0.5],
            normal: vec![-1.0, 0.0],
            basis: vec![vec![0.0, 1.0]],
            sigma_phi: DMatrix::identity(2, 2) * 0.1,
            p: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]),
            sigma_limit: DMatrix::from_row_slice(2, 2, &[0.1, 0.05, 0.05, 0.125]),
        }
    }

    #[test]
    fn rescale_examples() {
        let r = rescale_one(0.1, &[0.0, 0.05], &law(), 0.1).unwrap();
        assert_eq!((r.u, r.w[0]), (0.0, 0.0));
        let r = rescale_one(0.12, &[0.0, 0.07], &law(), 0.1).unwrap();
        assert!((r.u - 0.2).abs() < 1e-12 && (r.w[0] - 0.2).abs() < 1e-12);
        assert!(matches!(rescale_one(0.1, &[0.01, 0.05], &law(), 0.1), Err(Error::MalformedExitPoint { .. })));
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Reference values of the Kolmogorov distribution.
        assert!((kolmogorov_q(1.0) - 0.269_999_671_677_35).abs() < 1e-12);
        assert!((kolmogorov_q(1.358_099) - 0.049_999_902_04).abs() < 1e-9);
        assert!((kolmogorov_q(0.5) - 0.963_945_243_4).abs() < 1e-9);
        assert_eq!(kolmogorov_q(0.0), 1.0);
        // Both series agree at the switch point.
        let c = 1.18;
        let mut q = 0.0;
        for k in 1..=100 {
            let t = (-2.0 * (k * k) as f64 * c * c).exp();
            q += if k % 2 == 1 { t } else { -t };
        }
        assert!((kolmogorov_q(c - 1e-15) - 2.0 * q).abs() < 1e-12);
    }

    #[test]
    fn identical_lists() {
        let a = [0.3, -1.0, 2.0, 2.0];
        assert_eq!(two_sample_ks(&a, &a).unwrap(), KsResult { statistic: 0.0, p: 1.0 });
    }

    #[test]
    fn small_n_rejected() {
        let xs = vec![vec![0.0, 0.0]; 50];
        assert!(matches!(
            gaussian_comparison_vectors(&xs, &DMatrix::identity(2, 2), &Thresholds::default()),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn degenerate_prediction() {
        let xs = vec![vec![0.0, 0.0]; 200];
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            gaussian_comparison_vectors(&xs, &s, &Thresholds::default()),
            Err(Error::DegeneratePrediction { .. })
        ));
    }
}

//! Conditioning on exit through Γ: rejection, Doob h-transform drift and the
//! transition-kernel identity `P_Γ^t(x, dy) = h(y)/h(x) P^t(x, dy)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::VectorField;
use crate::elliptic::{GridField, H_FLOOR};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{Domain, DomainKind, Face};
use crate::rng::make_stream;
use crate::sim::{simulate_exit, simulate_exit_observed, ExitSample, SimConfig};

/// A positive function on the closed domain, typically `h(x) = P_x(C_Γ)`.
pub trait HField: Sync {
    fn dim(&self) -> usize;

    fn log_value(&self, x: &[f64]) -> Result<f64>;

    /// `Dh/h` at `x`.
    fn grad_log(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_value(x)?.exp())
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        self.grad_log(x, &mut g)?;
        let h = self.value(x)?;
        g.iter_mut().for_each(|v| *v *= h);
        Ok(g)
    }
}

impl<T: HField + ?Sized> HField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_value(&self, x: &[f64]) -> Result<f64> {
        (**self).log_value(x)
    }
    fn grad_log(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).grad_log(x, out)
    }
}

/// Exit-through-Γ probability for constant drift on a half-space:
/// `h = exp(−2 b_in d / (ε² s²))`, with `b_in` the drift component pointing
/// away from Γ and `d` the distance to Γ. `h ≡ 1` when the drift points at Γ.
///
/// Computed in log space, so it never underflows.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfPlaneH {
    domain: Domain,
    rate: f64,
}

impl HalfPlaneH {
    pub fn new(b: &[f64], domain: &Domain, eps: f64, sigma_scale: f64) -> Result<Self> {
        if !matches!(domain.kind(), DomainKind::HalfSpace { .. }) {
            return Err(Error::Unsupported("analytic h needs a half-space domain".into()));
        }
        check_dim(domain.dim(), b.len())?;
        if !(eps > 0.0) || !(sigma_scale > 0.0) {
            return Err(Error::InvalidInput("analytic h needs eps > 0 and sigma_scale > 0".into()));
        }
        let nu = domain.gamma_normal();
        let b_in = -b.iter().zip(&nu).map(|(x, y)| x * y).sum::<f64>();
        let s2 = sigma_scale * sigma_scale;
        let rate = if b_in > 0.0 { 2.0 * b_in / (eps * eps * s2) } else { 0.0 };
        Ok(Self { domain: domain.clone(), rate })
    }
}

impl HField for HalfPlaneH {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn log_value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(-self.rate * self.domain.face_distance(x, self.domain.gamma()))
    }

    fn grad_log(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), out.len())?;
        // D(distance to Γ) is the inward normal −ν.
        let nu = self.domain.gamma_normal();
        for (o, n) in out.iter_mut().zip(&nu) {
            *o = self.rate * n;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantH {
    pub dim: usize,
    pub value: f64,
}

impl HField for ConstantH {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_value(&self, _: &[f64]) -> Result<f64> {
        Ok(self.value.ln())
    }
    fn grad_log(&self, _: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
}

/// `h` from a grid solve. Where the surrounding cell is strictly positive,
/// `log h` and the nodal `D log h` are interpolated; cells touching a zero
/// node interpolate `h` and `Dh` and divide.
#[derive(Clone, Debug)]
pub struct GridHField {
    h: GridField,
    log_h: Vec<f64>,
    grad_log: Vec<Vec<f64>>,
    grad_h: Vec<Vec<f64>>,
}

impl GridHField {
    pub fn new(h: GridField) -> Result<Self> {
        if h.values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("grid h must be finite and non-negative".into()));
        }
        let d = h.dim();
        let n = h.len();
        let log_h: Vec<f64> = h.values.iter().map(|v| v.ln()).collect();
        let mut grad_log = vec![vec![f64::NAN; n]; d];
        let mut grad_h = vec![vec![0.0; n]; d];
        for a in 0..d {
            let dx = h.spacing(a);
            let s = h.stride(a);
            let na = h.shape[a];
            for k in 0..n {
                let i = (k / s) % na;
                let (idx, w): ([usize; 3], [f64; 3]) = if i == 0 {
                    ([k, k + s, k + 2 * s], [-1.5, 2.0, -0.5])
                } else if i + 1 == na {
                    ([k, k - s, k - 2 * s], [1.5, -2.0, 0.5])
                } else {
                    ([k - s, k, k + s], [-0.5, 0.0, 0.5])
                };
                let dh: f64 = idx.iter().zip(&w).map(|(&j, c)| c * h.values[j]).sum::<f64>() / dx;
                grad_h[a][k] = dh;
                if h.values[k] > 0.0 {
                    grad_log[a][k] = if idx.iter().all(|&j| h.values[j] > 0.0) {
                        idx.iter().zip(&w).map(|(&j, c)| c * log_h[j]).sum::<f64>() / dx
                    } else {
                        dh / h.values[k]
                    };
                }
            }
        }
        Ok(Self { h, log_h, grad_log, grad_h })
    }

    pub fn grid(&self) -> &GridField {
        &self.h
    }

    fn interp(ks: &[usize], frac: &[f64], f: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (corner, &k) in ks.iter().enumerate() {
            let w: f64 = frac
                .iter()
                .enumerate()
                .map(|(a, &t)| if (corner >> a) & 1 == 1 { t } else { 1.0 - t })
                .product();
            if w != 0.0 {
                acc += w * f[k];
            }
        }
        acc
    }

    fn positive_cell(&self, ks: &[usize]) -> bool {
        ks.iter().all(|&k| self.h.values[k] > 0.0)
    }
}

impl HField for GridHField {
    fn dim(&self) -> usize {
        self.h.dim()
    }

    fn log_value(&self, x: &[f64]) -> Result<f64> {
        let (ks, frac) = self.h.cell_corners(x)?;
        if self.positive_cell(&ks) {
            Ok(Self::interp(&ks, &frac, &self.log_h))
        } else {
            Ok(Self::interp(&ks, &frac, &self.h.values).ln())
        }
    }

    fn grad_log(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), out.len())?;
        let (ks, frac) = self.h.cell_corners(x)?;
        if self.positive_cell(&ks) {
            if Self::interp(&ks, &frac, &self.log_h) < H_FLOOR.ln() {
                return Err(Error::HUnderflow { x: x.to_vec() });
            }
            for (a, o) in out.iter_mut().enumerate() {
                *o = Self::interp(&ks, &frac, &self.grad_log[a]);
            }
        } else {
            let hv = Self::interp(&ks, &frac, &self.h.values);
            if !(hv >= H_FLOOR) {
                return Err(Error::HUnderflow { x: x.to_vec() });
            }
            for (a, o) in out.iter_mut().enumerate() {
                *o = Self::interp(&ks, &frac, &self.grad_h[a]) / hv;
            }
        }
        Ok(())
    }
}

/// `x ↦ b(x) + ε² a Dh(x)/h(x)`.
pub struct HTransformDrift<B, H> {
    b: B,
    a: DMatrix<f64>,
    h: H,
    eps: f64,
}

pub fn h_transform_drift<B: VectorField, H: HField>(
    b: B,
    a: DMatrix<f64>,
    h: H,
    eps: f64,
) -> Result<HTransformDrift<B, H>> {
    let n = b.dim();
    check_dim(n, h.dim())?;
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: a.nrows() });
    }
    if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) || a.clone().cholesky().is_none() {
        return Err(Error::InvalidInput("diffusion matrix must be symmetric positive definite".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("eps must be > 0".into()));
    }
    Ok(HTransformDrift { b, a, h, eps })
}

impl<B: VectorField, H: HField> VectorField for HTransformDrift<B, H> {
    fn dim(&self) -> usize {
        self.b.dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        self.b.eval(x, out)?;
        let mut g = [0.0; 8];
        let mut heap;
        let g: &mut [f64] = if n <= 8 {
            &mut g[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        self.h.grad_log(x, g)?;
        let e2 = self.eps * self.eps;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.a[(i, j)] * g[j];
            }
            out[i] += e2 * acc;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub sample: ExitSample,
    pub accepted: bool,
}

/// Trials in index order, each flagged accepted or not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionedBatch {
    pub records: Vec<TrialRecord>,
    pub attempted: u64,
    pub accepted: u64,
    pub truncated: u64,
    /// Non-truncated exits through a face other than Γ under an h-transformed drift.
    pub anomalies: u64,
    pub eps: f64,
    pub x0: Vec<f64>,
    pub gamma: Face,
}

impl ConditionedBatch {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }

    pub fn anomaly_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.anomalies as f64 / self.attempted as f64
        }
    }

    pub fn accepted_samples(&self) -> impl Iterator<Item = &ExitSample> {
        self.records.iter().filter(|r| r.accepted).map(|r| &r.sample)
    }

    pub fn exit_times(&self) -> Vec<f64> {
        self.accepted_samples().filter_map(|s| s.tau).collect()
    }

    /// Coordinate `axis` of the accepted exit points.
    pub fn exit_coordinate(&self, axis: usize) -> Vec<f64> {
        self.accepted_samples().filter_map(|s| s.exit_point.as_ref().map(|p| p[axis])).collect()
    }
}

const MIN_CHUNK: u64 = 256;
const MAX_CHUNK: u64 = 1 << 16;

/// Runs trials `0, 1, …` in parallel chunks and scans them in order until
/// `n_target` are accepted. The result depends only on the trial function.
fn drive<F>(n_target: u64, max_trials: u64, trial: F) -> Result<(Vec<TrialRecord>, bool)>
where
    F: Fn(u64) -> Result<TrialRecord> + Sync,
{
    let mut records = Vec::new();
    let mut accepted = 0u64;
    let mut next = 0u64;
    while accepted < n_target && next < max_trials {
        let need = (n_target - accepted) as f64;
        let rate = if next == 0 { 1.0 } else { (accepted.max(1) as f64) / next as f64 };
        let chunk = ((1.1 * need / rate).ceil() as u64).clamp(MIN_CHUNK, MAX_CHUNK).min(max_trials - next);
        let results: Vec<Result<TrialRecord>> = (next..next + chunk).into_par_iter().map(&trial).collect();
        for r in results {
            let rec = r?;
            accepted += rec.accepted as u64;
            records.push(rec);
            if accepted == n_target {
                break;
            }
        }
        next += chunk;
    }
    Ok((records, accepted >= n_target))
}

fn assemble_batch(records: Vec<TrialRecord>, eps: f64, x0: &[f64], gamma: Face) -> ConditionedBatch {
    let truncated = records.iter().filter(|r| r.sample.truncated).count() as u64;
    let accepted = records.iter().filter(|r| r.accepted).count() as u64;
    let anomalies = records
        .iter()
        .filter(|r| !r.sample.truncated && r.sample.face != Some(gamma))
        .count() as u64;
    ConditionedBatch {
        attempted: records.len() as u64,
        records,
        accepted,
        truncated,
        anomalies,
        eps,
        x0: x0.to_vec(),
        gamma,
    }
}

fn check_start(cfg: &SimConfig, x0: &[f64], domain: &Domain, n_target: u64) -> Result<()> {
    cfg.validate()?;
    check_dim(domain.dim(), x0.len())?;
    if n_target == 0 {
        return Err(Error::InvalidInput("cond.n_target must be ≥ 1".into()));
    }
    if !domain.contains(x0)? {
        return Err(Error::InvalidInput(format!("x0 {x0:?} is not interior")));
    }
    Ok(())
}

/// Simulates with the original drift and keeps exits through Γ.
pub fn rejection_sample(
    b: &dyn VectorField,
    cfg: &SimConfig,
    x0: &[f64],
    domain: &Domain,
    n_target: u64,
    max_trials: u64,
    seed: u64,
) -> Result<ConditionedBatch> {
    check_start(cfg, x0, domain, n_target)?;
    let gamma = domain.gamma();
    let (records, done) = drive(n_target, max_trials, |i| {
        let sample = simulate_exit(b, cfg, x0, domain, &mut make_stream(seed, i))?;
        let accepted = sample.exited_through(gamma);
        Ok(TrialRecord { trial: i, sample, accepted })
    })?;
    let mut batch = assemble_batch(records, cfg.eps, x0, gamma);
    // Non-Γ exits are the rejected outcome here, not anomalies.
    batch.anomalies = 0;
    if !done {
        return Err(Error::AcceptanceTooLow {
            accepted: batch.accepted,
            attempted: batch.attempted,
            batch: Box::new(batch),
        });
    }
    Ok(batch)
}

/// Simulates with the h-transformed drift. Every exit through Γ is accepted;
/// exits elsewhere are counted as anomalies and excluded.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_sample_via_h(
    b: &dyn VectorField,
    a: &DMatrix<f64>,
    h: &dyn HField,
    cfg: &SimConfig,
    x0: &[f64],
    domain: &Domain,
    n_target: u64,
    seed: u64,
) -> Result<ConditionedBatch> {
    check_start(cfg, x0, domain, n_target)?;
    let drift = h_transform_drift(b, a.clone(), h, cfg.eps)?;
    let gamma = domain.gamma();
    let max_trials = 2 * n_target + 100;
    let (records, done) = drive(n_target, max_trials, |i| {
        let sample = simulate_exit(&drift, cfg, x0, domain, &mut make_stream(seed, i))?;
        let accepted = sample.exited_through(gamma);
        Ok(TrialRecord { trial: i, sample, accepted })
    })?;
    let batch = assemble_batch(records, cfg.eps, x0, gamma);
    if !done {
        return Err(Error::AcceptanceTooLow {
            accepted: batch.accepted,
            attempted: batch.attempted,
            batch: Box::new(batch),
        });
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub threshold: f64,
    pub cdf_rejection: f64,
    pub cdf_weighted: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelRatioReport {
    pub n: u64,
    pub t_check: f64,
    pub accepted: u64,
    pub mean_weight: f64,
    /// Weighted two-sample KS statistic per coordinate.
    pub ks: Vec<f64>,
    /// Per coordinate, CDF comparisons at the 5%, 15%, …, 95% quantiles of
    /// the rejection estimate.
    pub quantiles: Vec<Vec<QuantileRow>>,
    pub max_abs_z: f64,
}

/// sup_c |F_a(c) − F_b(c)| for weighted empirical CDFs.
pub fn weighted_ks(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> f64 {
    let sa: f64 = wa.iter().sum();
    let sb: f64 = wb.iter().sum();
    if !(sa > 0.0) || !(sb > 0.0) {
        return f64::NAN;
    }
    let mut pts: Vec<(f64, f64)> = xa
        .iter()
        .zip(wa)
        .map(|(&x, &w)| (x, w / sa))
        .chain(xb.iter().zip(wb).map(|(&x, &w)| (x, -w / sb)))
        .collect();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut diff: f64 = 0.0;
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < pts.len() {
        let x = pts[i].0;
        while i < pts.len() && pts[i].0 == x {
            diff += pts[i].1;
            i += 1;
        }
        best = best.max(diff.abs());
    }
    best
}

/// Compares the conditioned marginal at `t_check` estimated by rejection
/// with the `h(X_t)/h(x0)`-reweighted unconditioned marginal, on the same paths.
#[allow(clippy::too_many_arguments)]
pub fn kernel_ratio_check(
    b: &dyn VectorField,
    h: &dyn HField,
    cfg: &SimConfig,
    x0: &[f64],
    domain: &Domain,
    t_check: f64,
    n: u64,
    seed: u64,
) -> Result<KernelRatioReport> {
    check_start(cfg, x0, domain, n)?;
    if !(t_check >= 0.0) {
        return Err(Error::InvalidInput("t_check must be ≥ 0".into()));
    }
    let gamma = domain.gamma();
    let h0 = h.value(x0)?;
    let rows: Vec<(bool, Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (s, obs) = simulate_exit_observed(b, cfg, x0, domain, &mut make_stream(seed, i), Some(t_check))?;
            let y = obs.expect("observation requested");
            let w = h.value(&y)? / h0;
            Ok((s.exited_through(gamma), y, w))
        })
        .collect::<Result<_>>()?;

    let dim = x0.len();
    let acc: Vec<&(bool, Vec<f64>, f64)> = rows.iter().filter(|r| r.0).collect();
    let n_acc = acc.len() as f64;
    let w: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let w_mean = w.iter().sum::<f64>() / n as f64;
    let mut ks = Vec::with_capacity(dim);
    let mut quantiles = Vec::with_capacity(dim);
    let mut max_abs_z: f64 = 0.0;
    for k in 0..dim {
        let xr: Vec<f64> = acc.iter().map(|r| r.1[k]).collect();
        let xw: Vec<f64> = rows.iter().map(|r| r.1[k]).collect();
        ks.push(weighted_ks(&xr, &vec![1.0; xr.len()], &xw, &w));
        let mut sorted = xr.clone();
        sorted.sort_by(f64::total_cmp);
        let mut qrows = Vec::new();
        if !sorted.is_empty() {
            for j in 0..10 {
                let p = (j as f64 + 0.5) / 10.0;
                let c = sorted[((p * sorted.len() as f64) as usize).min(sorted.len() - 1)];
                let f1 = xr.iter().filter(|&&x| x <= c).count() as f64 / n_acc;
                let se1 = (f1 * (1.0 - f1) / n_acc).sqrt();
                let num: f64 = xw.iter().zip(&w).filter(|(&x, _)| x <= c).map(|(_, &wi)| wi).sum::<f64>() / n as f64;
                let f2 = num / w_mean;
                let var2 = xw
                    .iter()
                    .zip(&w)
                    .map(|(&x, &wi)| {
                        let ind = if x <= c { 1.0 } else { 0.0 };
                        (wi * (ind - f2)).powi(2)
                    })
                    .sum::<f64>()
                    / n as f64;
                let se2 = (var2 / n as f64).sqrt() / w_mean;
                let se = (se1 * se1 + se2 * se2).sqrt();
                let diff = f1 - f2;
                let z = if se > 0.0 { diff / se } else if diff.abs() < 1e-12 { 0.0 } else { f64::INFINITY };
                max_abs_z = max_abs_z.max(z.abs());
                qrows.push(QuantileRow { threshold: c, cdf_rejection: f1, cdf_weighted: f2, se, z });
            }
        }
        quantiles.push(qrows);
    }
    Ok(KernelRatioReport {
        n,
        t_check,
        accepted: acc.len() as u64,
        mean_weight: w_mean,
        ks,
        quantiles,
        max_abs_z,
    })
}

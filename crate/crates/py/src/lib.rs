//! Python bindings for the exit-problem toolkit.
//!
//! Structured results (samples, reports, limit laws) are returned as plain
//! Python dicts and lists.

use exitlim_core::characteristics::{shoot_fan, CharacteristicFan, FanConfig, FanDrift};
use exitlim_core::conditioning::{
    conditioned_sample_via_h, rejection_sample, ConditionedBatch, GridHField, HalfPlaneH,
};
use exitlim_core::dynamics::{DriftFieldModel, Monomial};
use exitlim_core::elliptic::{solve_h_eps, GridField, SolveOptions};
use exitlim_core::geometry::{Domain as CoreDomain, Face, Side};
use exitlim_core::limit::{build_limit_law, LimitLaw as CoreLaw};
use exitlim_core::rng::make_stream;
use exitlim_core::sim::{simulate_exit, SimConfig as CoreSim};
use exitlim_core::stats::{self, Thresholds};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

create_exception!(exitlim_py, ExitlimError, PyValueError);

fn to_py(e: exitlim_core::Error) -> PyErr {
    ExitlimError::new_err(e.to_string())
}

fn json_obj<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| ExitlimError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn side(s: &str) -> PyResult<Side> {
    match s {
        "lo" => Ok(Side::Lower),
        "hi" => Ok(Side::Upper),
        _ => Err(PyValueError::new_err(format!("side must be \"lo\" or \"hi\", got {s:?}"))),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[pyclass(module = "exitlim_py", frozen)]
struct Domain(CoreDomain);

#[pymethods]
impl Domain {
    /// Half-space `{x : ±(x[axis] - level) < 0}`; its whole boundary is the exit patch.
    #[staticmethod]
    #[pyo3(signature = (dim, axis, level=0.0, side="lo"))]
    fn half_space(dim: usize, axis: usize, level: f64, side: &str) -> PyResult<Self> {
        CoreDomain::half_space(dim, axis, level, self::side(side)?).map(Self).map_err(to_py)
    }

    /// Axis-aligned box with exit patch on face `(gamma_axis, gamma_side)`.
    #[staticmethod]
    #[pyo3(signature = (lo, hi, gamma_axis=0, gamma_side="lo"))]
    fn r#box(lo: Vec<f64>, hi: Vec<f64>, gamma_axis: usize, gamma_side: &str) -> PyResult<Self> {
        CoreDomain::boxed(lo, hi, Face::new(gamma_axis, side(gamma_side)?)).map(Self).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn contains(&self, x: Vec<f64>) -> PyResult<bool> {
        self.0.contains(&x).map_err(to_py)
    }

    fn gamma_normal(&self) -> Vec<f64> {
        self.0.gamma_normal()
    }

    fn __repr__(&self) -> String {
        format!("Domain({:?}, gamma={})", self.0.kind(), self.0.gamma())
    }
}

#[pyclass(module = "exitlim_py", frozen)]
struct Drift(DriftFieldModel);

#[pymethods]
impl Drift {
    #[staticmethod]
    fn constant(c: Vec<f64>) -> PyResult<Self> {
        DriftFieldModel::constant(c).map(Self).map_err(to_py)
    }

    /// `b(x) = matrix @ x + offset`.
    #[staticmethod]
    fn affine(matrix: Vec<Vec<f64>>, offset: Vec<f64>) -> PyResult<Self> {
        DriftFieldModel::affine(matrix, offset).map(Self).map_err(to_py)
    }

    /// `components[i]` is a list of `(coeff, powers)` terms of `b^i`; total degree ≤ 3.
    #[staticmethod]
    fn polynomial(components: Vec<Vec<(f64, Vec<u32>)>>) -> PyResult<Self> {
        let comps = components
            .into_iter()
            .map(|c| c.into_iter().map(|(coeff, powers)| Monomial { coeff, powers }).collect())
            .collect();
        DriftFieldModel::polynomial(comps).map(Self).map_err(to_py)
    }

    /// `b(x) = (c1 + c2 x2², c3 x1)`.
    #[staticmethod]
    fn quadratic_shear(c1: f64, c2: f64, c3: f64) -> Self {
        Self(DriftFieldModel::quadratic_shear(c1, c2, c3))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dimension()
    }

    fn __call__(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.eval_drift(&x).map_err(to_py)
    }

    fn jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.0.eval_jacobian(&x).map(|m| rows(&m)).map_err(to_py)
    }
}

#[pyclass(module = "exitlim_py", frozen)]
struct SimConfig(CoreSim);

#[pymethods]
impl SimConfig {
    #[new]
    #[pyo3(signature = (eps, dt, t_max, sigma_scale=1.0, bridge=true))]
    fn new(eps: f64, dt: f64, t_max: f64, sigma_scale: f64, bridge: bool) -> PyResult<Self> {
        let cfg = CoreSim { sigma_scale, bridge, ..CoreSim::new(eps, dt, t_max) };
        cfg.validate().map_err(to_py)?;
        Ok(Self(cfg))
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.0.eps
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!("SimConfig(eps={}, dt={}, t_max={}, sigma_scale={}, bridge={})", c.eps, c.dt, c.t_max, c.sigma_scale, c.bridge)
    }
}

/// Conditioned samples; `records` holds every trial in index order.
#[pyclass(module = "exitlim_py", frozen)]
struct Batch(ConditionedBatch);

#[pymethods]
impl Batch {
    #[getter]
    fn attempted(&self) -> u64 {
        self.0.attempted
    }

    #[getter]
    fn accepted(&self) -> u64 {
        self.0.accepted
    }

    #[getter]
    fn anomalies(&self) -> u64 {
        self.0.anomalies
    }

    fn acceptance_rate(&self) -> f64 {
        self.0.acceptance_rate()
    }

    fn anomaly_rate(&self) -> f64 {
        self.0.anomaly_rate()
    }

    fn exit_times(&self) -> Vec<f64> {
        self.0.exit_times()
    }

    fn exit_coordinate(&self, axis: usize) -> Vec<f64> {
        self.0.exit_coordinate(axis)
    }

    fn records(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_obj(py, &self.0.records)
    }

    fn __len__(&self) -> usize {
        self.0.accepted as usize
    }
}

/// Values on a tensor grid over a box.
#[pyclass(module = "exitlim_py", frozen)]
struct Grid(GridField);

#[pymethods]
impl Grid {
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape.clone()
    }

    #[getter]
    fn lo(&self) -> Vec<f64> {
        self.0.lo.clone()
    }

    #[getter]
    fn hi(&self) -> Vec<f64> {
        self.0.hi.clone()
    }

    /// Flat values, first axis varying fastest.
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values.clone()
    }

    fn sample(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.sample(&x).map_err(to_py)
    }
}

#[pyclass(module = "exitlim_py", frozen)]
struct LimitLaw(CoreLaw);

#[pymethods]
impl LimitLaw {
    #[getter(T)]
    fn t_exit(&self) -> f64 {
        self.0.t_exit
    }

    #[getter]
    fn z(&self) -> Vec<f64> {
        self.0.z.clone()
    }

    #[getter]
    fn sigma_phi(&self) -> Vec<Vec<f64>> {
        rows(&self.0.sigma_phi)
    }

    #[getter]
    fn projection(&self) -> Vec<Vec<f64>> {
        rows(&self.0.p)
    }

    #[getter]
    fn sigma_limit(&self) -> Vec<Vec<f64>> {
        rows(&self.0.sigma_limit)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_obj(py, &self.0)
    }

    /// `(u, w)` with `u = (tau - T)/eps` and `w` the tangential coordinates of `(X(tau) - z)/eps`.
    fn rescale(&self, batch: &Batch) -> PyResult<Vec<(f64, Vec<f64>)>> {
        let s = stats::rescale(&batch.0, &self.0).map_err(to_py)?;
        Ok(s.into_iter().map(|r| (r.u, r.w)).collect())
    }

    /// Covariance z-scores and KS tests of the rescaled batch against the limit.
    #[pyo3(signature = (batch, z_max=4.0, ks_p_min=1e-3, mahalanobis_p_min=1e-3))]
    fn compare(&self, py: Python<'_>, batch: &Batch, z_max: f64, ks_p_min: f64, mahalanobis_p_min: f64) -> PyResult<Py<PyAny>> {
        let th = Thresholds { z_max, ks_p_min, mahalanobis_p_min };
        let s = stats::rescale(&batch.0, &self.0).map_err(to_py)?;
        let report = stats::gaussian_comparison(&s, &self.0, &th).map_err(to_py)?;
        json_obj(py, &report)
    }
}

/// Characteristics of the inviscid HJB equation shot from a patch of Γ.
#[pyclass(module = "exitlim_py", frozen)]
struct Fan(CharacteristicFan);

#[pymethods]
impl Fan {
    #[new]
    #[pyo3(signature = (drift, domain, patch_lo, patch_hi, n_rays, dt, t_max, with_v1=true))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        py: Python<'_>,
        drift: &Drift,
        domain: &Domain,
        patch_lo: f64,
        patch_hi: f64,
        n_rays: usize,
        dt: f64,
        t_max: f64,
        with_v1: bool,
    ) -> PyResult<Self> {
        let cfg = FanConfig::new(patch_lo, patch_hi, n_rays, dt, t_max);
        py.detach(|| {
            let fan = shoot_fan(&drift.0, &domain.0, &cfg)?;
            if with_v1 {
                fan.augment_v1()
            } else {
                Ok(fan)
            }
        })
        .map(Self)
        .map_err(to_py)
    }

    #[getter]
    fn valid_count(&self) -> usize {
        self.0.valid_count()
    }

    fn max_eikonal_residual(&self) -> PyResult<f64> {
        self.0.max_eikonal_residual().map_err(to_py)
    }

    /// `v0`, `Dv0`, `b0bar` (and `v1`, `Dv1` when available) at a point.
    fn at(&self, py: Python<'_>, x: Vec<f64>) -> PyResult<Py<PyAny>> {
        let p = self.0.invert_fan(&x).map_err(to_py)?;
        json_obj(py, &p)
    }

    /// Limit law of the exit pair from `x0` under `b0bar = b - Dv0`.
    #[pyo3(signature = (x0, dt=1e-3, t_max=10.0))]
    fn limit_law(&self, py: Python<'_>, x0: Vec<f64>, dt: f64, t_max: f64) -> PyResult<LimitLaw> {
        let a = DMatrix::identity(2, 2);
        py.detach(|| build_limit_law(&FanDrift::b0bar(&self.0), &a, &x0, self.0.domain(), dt, t_max))
            .map(LimitLaw)
            .map_err(to_py)
    }
}

/// One path of `dX = b dt + eps dW`; trial `trial` of stream `seed`.
#[pyfunction]
#[pyo3(signature = (drift, cfg, x0, domain, seed, trial=0))]
fn simulate(py: Python<'_>, drift: &Drift, cfg: &SimConfig, x0: Vec<f64>, domain: &Domain, seed: u64, trial: u64) -> PyResult<Py<PyAny>> {
    let s = simulate_exit(&drift.0, &cfg.0, &x0, &domain.0, &mut make_stream(seed, trial)).map_err(to_py)?;
    json_obj(py, &s)
}

#[pyfunction]
#[pyo3(signature = (drift, cfg, x0, domain, n_target, seed, max_trials=None))]
#[allow(clippy::too_many_arguments)]
fn sample_rejection(
    py: Python<'_>,
    drift: &Drift,
    cfg: &SimConfig,
    x0: Vec<f64>,
    domain: &Domain,
    n_target: u64,
    seed: u64,
    max_trials: Option<u64>,
) -> PyResult<Batch> {
    let max_trials = max_trials.unwrap_or(1000 * n_target);
    py.detach(|| rejection_sample(&drift.0, &cfg.0, &x0, &domain.0, n_target, max_trials, seed))
        .map(Batch)
        .map_err(to_py)
}

/// h-transform sampling with the closed-form half-space `h`, or with a
/// solved grid `h` when `h_grid` is given.
#[pyfunction]
#[pyo3(signature = (drift, cfg, x0, domain, n_target, seed, h_grid=None))]
#[allow(clippy::too_many_arguments)]
fn sample_htransform(
    py: Python<'_>,
    drift: &Drift,
    cfg: &SimConfig,
    x0: Vec<f64>,
    domain: &Domain,
    n_target: u64,
    seed: u64,
    h_grid: Option<&Grid>,
) -> PyResult<Batch> {
    let c = &cfg.0;
    let n = domain.0.dim();
    let a = DMatrix::identity(n, n) * (c.sigma_scale * c.sigma_scale);
    let run = || match h_grid {
        Some(g) => {
            let h = GridHField::new(g.0.clone())?;
            conditioned_sample_via_h(&drift.0, &a, &h, c, &x0, &domain.0, n_target, seed)
        }
        None => {
            let DriftFieldModel::Constant { c: b } = &drift.0 else {
                return Err(exitlim_core::Error::Unsupported("closed-form h needs a constant drift".into()));
            };
            let h = HalfPlaneH::new(b, &domain.0, c.eps, c.sigma_scale)?;
            conditioned_sample_via_h(&drift.0, &a, &h, c, &x0, &domain.0, n_target, seed)
        }
    };
    py.detach(run).map(Batch).map_err(to_py)
}

/// Solves for the exit probability `h^eps` on a 1-D or 2-D box; returns `(grid, report)`.
#[pyfunction]
#[pyo3(signature = (drift, eps, domain, shape, tol=1e-10))]
fn solve_h(py: Python<'_>, drift: &Drift, eps: f64, domain: &Domain, shape: Vec<usize>, tol: f64) -> PyResult<(Grid, Py<PyAny>)> {
    let opts = SolveOptions { tol, ..SolveOptions::default() };
    let (h, report) = py.detach(|| solve_h_eps(&drift.0, eps, &domain.0, &shape, &opts)).map_err(to_py)?;
    Ok((Grid(h), json_obj(py, &report)?))
}

/// Limit law from `x0` for a constant drift, whose conditioned limit drift
/// is the reflection of `b` in Γ.
#[pyfunction]
#[pyo3(signature = (drift, domain, x0, a=None, dt=1e-3, t_max=10.0))]
fn limit_law_constant(drift: &Drift, domain: &Domain, x0: Vec<f64>, a: Option<Vec<Vec<f64>>>, dt: f64, t_max: f64) -> PyResult<LimitLaw> {
    let DriftFieldModel::Constant { c: b } = &drift.0 else {
        return Err(ExitlimError::new_err("limit_law_constant needs a constant drift"));
    };
    let nu = domain.0.gamma_normal();
    let bn: f64 = b.iter().zip(&nu).map(|(x, y)| x * y).sum();
    let reflected: Vec<f64> = if bn >= 0.0 {
        b.clone()
    } else {
        b.iter().zip(&nu).map(|(x, y)| x - 2.0 * bn * y).collect()
    };
    let b0bar = DriftFieldModel::constant(reflected).map_err(to_py)?;
    let n = domain.0.dim();
    let a = match a {
        Some(r) => matrix(&r)?,
        None => DMatrix::identity(n, n),
    };
    build_limit_law(&b0bar, &a, &x0, &domain.0, dt, t_max).map(LimitLaw).map_err(to_py)
}

/// Two-sample Kolmogorov–Smirnov test; returns `(D, p)`.
#[pyfunction]
fn ks_2samp(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::two_sample_ks(&a, &b).map_err(to_py)?;
    Ok((r.statistic, r.p))
}

/// Compares zero-mean vectors with `N(0, sigma)`.
#[pyfunction]
#[pyo3(signature = (xs, sigma, z_max=4.0, ks_p_min=1e-3, mahalanobis_p_min=1e-3))]
fn gaussian_comparison(py: Python<'_>, xs: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, z_max: f64, ks_p_min: f64, mahalanobis_p_min: f64) -> PyResult<Py<PyAny>> {
    let th = Thresholds { z_max, ks_p_min, mahalanobis_p_min };
    let r = stats::gaussian_comparison_vectors(&xs, &matrix(&sigma)?, &th).map_err(to_py)?;
    json_obj(py, &r)
}

/// Calibration and power checks of the statistical tests.
#[pyfunction]
fn self_tests(py: Python<'_>, sigma: Vec<Vec<f64>>, seeds: Vec<u64>) -> PyResult<Py<PyAny>> {
    let sigma = matrix(&sigma)?;
    let r = py.detach(|| stats::self_tests(&sigma, &seeds)).map_err(to_py)?;
    json_obj(py, &r)
}

#[pymodule]
fn exitlim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ExitlimError", m.py().get_type::<ExitlimError>())?;
    m.add_class::<Domain>()?;
    m.add_class::<Drift>()?;
    m.add_class::<SimConfig>()?;
    m.add_class::<Batch>()?;
    m.add_class::<Grid>()?;
    m.add_class::<LimitLaw>()?;
    m.add_class::<Fan>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sample_rejection, m)?)?;
    m.add_function(wrap_pyfunction!(sample_htransform, m)?)?;
    m.add_function(wrap_pyfunction!(solve_h, m)?)?;
    m.add_function(wrap_pyfunction!(limit_law_constant, m)?)?;
    m.add_function(wrap_pyfunction!(ks_2samp, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_comparison, m)?)?;
    m.add_function(wrap_pyfunction!(self_tests, m)?)?;
    Ok(())
}

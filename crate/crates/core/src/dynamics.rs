//! Drift models, deterministic flows and matrix variational equations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Domain, Face};

/// A vector field on `R^n`.
///
/// Evaluation is fallible because some fields (h-transformed drifts, fields
/// read off a characteristic fan) are only defined on part of the space.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()>;
}

/// A field with an analytic (or otherwise independently computed) Jacobian.
pub trait JacobianField: VectorField {
    /// `J[(i, k)] = ∂_k f_i(x)`.
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>>;
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).eval(x, out)
    }
}

impl<T: JacobianField + ?Sized> JacobianField for &T {
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        (**self).jacobian(x)
    }
}

/// Adapter turning a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(x, out);
        Ok(())
    }
}

/// One term `coeff · Π x_k^{powers[k]}` of a polynomial component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

impl Monomial {
    fn degree(&self) -> u32 {
        self.powers.iter().sum()
    }

    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        self.powers
            .iter()
            .zip(x)
            .fold(self.coeff, |acc, (&p, &xk)| acc * xk.powi(p as i32))
    }

    #[inline]
    fn partial(&self, x: &[f64], k: usize) -> f64 {
        let pk = self.powers[k];
        if pk == 0 {
            return 0.0;
        }
        let mut v = self.coeff * pk as f64;
        for (i, (&p, &xi)) in self.powers.iter().zip(x).enumerate() {
            let e = if i == k { p - 1 } else { p };
            v *= xi.powi(e as i32);
        }
        v
    }
}

/// Analytic drift families with exact Jacobians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DriftFieldModel {
    Constant { c: Vec<f64> },
    /// `b(x) = B x + c` with `B` stored row-major.
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// Polynomial of total degree ≤ 3; `components[i]` lists the terms of `b^i`.
    Polynomial { components: Vec<Vec<Monomial>> },
}

impl DriftFieldModel {
    pub fn constant(c: Vec<f64>) -> Result<Self> {
        let m = Self::Constant { c };
        m.validate()?;
        Ok(m)
    }

    pub fn affine(matrix: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        let m = Self::Affine { matrix, offset };
        m.validate()?;
        Ok(m)
    }

    pub fn polynomial(components: Vec<Vec<Monomial>>) -> Result<Self> {
        let m = Self::Polynomial { components };
        m.validate()?;
        Ok(m)
    }

    /// The two-dimensional test field `b(x) = (c1 + c2·x₂², c3·x₁)`.
    pub fn quadratic_shear(c1: f64, c2: f64, c3: f64) -> Self {
        Self::Polynomial {
            components: vec![
                vec![
                    Monomial { coeff: c1, powers: vec![0, 0] },
                    Monomial { coeff: c2, powers: vec![0, 2] },
                ],
                vec![Monomial { coeff: c3, powers: vec![1, 0] }],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &f64| v.is_finite();
        match self {
            Self::Constant { c } => {
                if c.is_empty() || !c.iter().all(finite) {
                    return Err(Error::InvalidInput("constant drift needs finite coefficients".into()));
                }
            }
            Self::Affine { matrix, offset } => {
                let n = offset.len();
                if n == 0
                    || matrix.len() != n
                    || matrix.iter().any(|r| r.len() != n || !r.iter().all(finite))
                    || !offset.iter().all(finite)
                {
                    return Err(Error::InvalidInput(
                        "affine drift needs an n×n finite matrix and a finite offset".into(),
                    ));
                }
            }
            Self::Polynomial { components } => {
                let n = components.len();
                if n == 0 {
                    return Err(Error::InvalidInput("polynomial drift has no components".into()));
                }
                for term in components.iter().flatten() {
                    if term.powers.len() != n || !term.coeff.is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "polynomial term {term:?} does not match dimension {n}"
                        )));
                    }
                    if term.degree() > 3 {
                        return Err(Error::InvalidInput(format!(
                            "polynomial term {term:?} exceeds degree 3"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::Constant { c } => c.len(),
            Self::Affine { offset, .. } => offset.len(),
            Self::Polynomial { components } => components.len(),
        }
    }

    /// `b(x)` as a fresh vector.
    pub fn eval_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dimension()];
        self.eval(x, &mut out)?;
        Ok(out)
    }

    /// `Db(x)`.
    pub fn eval_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.jacobian(x)
    }

    #[inline]
    pub(crate) fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Constant { c } => out.copy_from_slice(c),
            Self::Affine { matrix, offset } => {
                for (o, (row, c)) in out.iter_mut().zip(matrix.iter().zip(offset)) {
                    *o = c + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Self::Polynomial { components } => {
                for (o, terms) in out.iter_mut().zip(components) {
                    *o = terms.iter().map(|t| t.eval(x)).sum();
                }
            }
        }
    }
}

impl VectorField for DriftFieldModel {
    fn dim(&self) -> usize {
        self.dimension()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dimension();
        check_dim(n, x.len())?;
        check_dim(n, out.len())?;
        self.eval_into(x, out);
        Ok(())
    }
}

impl JacobianField for DriftFieldModel {
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.dimension();
        check_dim(n, x.len())?;
        Ok(match self {
            Self::Constant { .. } => DMatrix::zeros(n, n),
            Self::Affine { matrix, .. } => DMatrix::from_fn(n, n, |i, k| matrix[i][k]),
            Self::Polynomial { components } => DMatrix::from_fn(n, n, |i, k| {
                components[i].iter().map(|t| t.partial(x, k)).sum()
            }),
        })
    }
}

/// Samples of a deterministic flow up to its first boundary hit.
///
/// `times` is uniform with step `dt` except for the final, partial step that
/// ends at `exit_time`. `mid_states[i]` is the state halfway through step `i`.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub mid_states: Vec<Vec<f64>>,
    pub exit_time: f64,
    pub exit_point: Vec<f64>,
    pub exit_face: Face,
}

/// Matrix samples along a trajectory, `mats[i]` at `times[i]` and `mids[i]`
/// halfway through step `i`.
#[derive(Clone, Debug)]
pub struct MatrixPath {
    pub times: Vec<f64>,
    pub mats: Vec<DMatrix<f64>>,
    pub mids: Vec<DMatrix<f64>>,
}

impl MatrixPath {
    pub fn last(&self) -> &DMatrix<f64> {
        self.mats.last().expect("matrix path is never empty")
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

fn rk4_step(field: &dyn VectorField, x: &[f64], h: f64, out: &mut [f64], s: &mut Rk4Scratch) -> Result<()> {
    let n = x.len();
    field.eval(x, &mut s.k1)?;
    for i in 0..n {
        s.tmp[i] = x[i] + 0.5 * h * s.k1[i];
    }
    field.eval(&s.tmp, &mut s.k2)?;
    for i in 0..n {
        s.tmp[i] = x[i] + 0.5 * h * s.k2[i];
    }
    field.eval(&s.tmp, &mut s.k3)?;
    for i in 0..n {
        s.tmp[i] = x[i] + h * s.k3[i];
    }
    field.eval(&s.tmp, &mut s.k4)?;
    for i in 0..n {
        out[i] = x[i] + h / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
    Ok(())
}

/// Integrates `ẋ = field(x)` for a fixed time with the classical RK4 method.
pub fn flow_for_time(field: &dyn VectorField, x0: &[f64], t_end: f64, dt: f64) -> Result<Vec<f64>> {
    check_dim(field.dim(), x0.len())?;
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidInput("need dt > 0 and t_end ≥ 0".into()));
    }
    let mut s = Rk4Scratch::new(x0.len());
    let mut x = x0.to_vec();
    let mut next = x.clone();
    let steps = (t_end / dt).floor() as usize;
    for _ in 0..steps {
        rk4_step(field, &x, dt, &mut next, &mut s)?;
        std::mem::swap(&mut x, &mut next);
    }
    let rest = t_end - steps as f64 * dt;
    if rest > 0.0 {
        rk4_step(field, &x, rest, &mut next, &mut s)?;
        x = next;
    }
    Ok(x)
}

const EXIT_TIME_TOL: f64 = 1e-12;
const MAX_BISECTIONS: usize = 64;

/// Integrates `ẋ = field(x)` from `x0` until the path hits `∂O`.
///
/// Fixed-step RK4; on the step that leaves the domain the exit time is
/// located by bisection on the step length until the bracket is below
/// `1e-12`.
pub fn flow_to_exit(
    field: &dyn VectorField,
    x0: &[f64],
    domain: &Domain,
    dt: f64,
    t_max: f64,
) -> Result<TrajectoryRecord> {
    let n = domain.dim();
    check_dim(n, field.dim())?;
    check_dim(n, x0.len())?;
    if !(dt > 0.0) || !(t_max > 0.0) {
        return Err(Error::InvalidInput("need dt > 0 and t_max > 0".into()));
    }
    if !domain.contains_unchecked(x0) {
        return Err(Error::InvalidInput(format!("initial point {x0:?} is not interior")));
    }
    let mut s = Rk4Scratch::new(n);
    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];
    let mut mid_states = Vec::new();
    let mut next = vec![0.0; n];
    let mut mid = vec![0.0; n];
    let mut step = 0usize;
    loop {
        let t = step as f64 * dt;
        if t >= t_max {
            return Err(Error::NoExit { t_max });
        }
        let x = states.last().unwrap().clone();
        rk4_step(field, &x, dt, &mut next, &mut s)?;
        if domain.contains_unchecked(&next) {
            rk4_step(field, &x, 0.5 * dt, &mut mid, &mut s)?;
            mid_states.push(mid.clone());
            states.push(next.clone());
            step += 1;
            times.push(step as f64 * dt);
            continue;
        }
        // Bracket the exit inside this step.
        let (mut lo, mut hi) = (0.0, dt);
        let mut x_lo = x.clone();
        let mut x_hi = next.clone();
        let mut probe = vec![0.0; n];
        for _ in 0..MAX_BISECTIONS {
            if hi - lo <= EXIT_TIME_TOL {
                break;
            }
            let h = 0.5 * (lo + hi);
            rk4_step(field, &x, h, &mut probe, &mut s)?;
            if domain.contains_unchecked(&probe) {
                lo = h;
                x_lo.copy_from_slice(&probe);
            } else {
                hi = h;
                x_hi.copy_from_slice(&probe);
            }
        }
        let crossing = domain
            .crossing_unchecked(&x_lo, &x_hi)
            .ok_or_else(|| Error::InvalidInput("exit bracket lost the boundary".into()))?;
        let h_exit = lo + crossing.theta * (hi - lo);
        rk4_step(field, &x, 0.5 * h_exit, &mut mid, &mut s)?;
        mid_states.push(mid.clone());
        states.push(crossing.point.clone());
        let exit_time = t + h_exit;
        times.push(exit_time);
        return Ok(TrajectoryRecord {
            dt,
            times,
            states,
            mid_states,
            exit_time,
            exit_point: crossing.point,
            exit_face: crossing.face,
        });
    }
}

/// RK4 on a matrix ODE `Ṁ = rhs(x(t), M)` along a stored trajectory, using
/// the trajectory's start, midpoint and end states for the stages.
pub fn integrate_matrix_along<F>(traj: &TrajectoryRecord, m0: DMatrix<f64>, rhs: F) -> Result<MatrixPath>
where
    F: Fn(&[f64], &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let steps = traj.times.len() - 1;
    let mut mats = Vec::with_capacity(steps + 1);
    let mut mids = Vec::with_capacity(steps);
    let mut m = m0;
    let mut deriv = rhs(&traj.states[0], &m)?;
    mats.push(m.clone());
    for i in 0..steps {
        let h = traj.times[i + 1] - traj.times[i];
        let (xm, xb) = (&traj.mid_states[i], &traj.states[i + 1]);
        let k1 = deriv;
        let k2 = rhs(xm, &(&m + &k1 * (0.5 * h)))?;
        let k3 = rhs(xm, &(&m + &k2 * (0.5 * h)))?;
        let k4 = rhs(xb, &(&m + &k3 * h))?;
        let m_next = &m + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        let d_next = rhs(xb, &m_next)?;
        // Cubic Hermite midpoint, fourth-order accurate.
        let m_mid = (&m + &m_next) * 0.5 + (&k1 - &d_next) * (h / 8.0);
        mids.push(m_mid);
        mats.push(m_next.clone());
        m = m_next;
        deriv = d_next;
    }
    Ok(MatrixPath {
        times: traj.times.clone(),
        mats,
        mids,
    })
}

/// Linearized flow `Φ̇ = J(x(t)) Φ`, `Φ(0) = I`.
pub fn variational_matrix(jac: &dyn JacobianField, traj: &TrajectoryRecord) -> Result<MatrixPath> {
    let n = traj.states[0].len();
    integrate_matrix_along(traj, DMatrix::identity(n, n), |x, m| Ok(jac.jacobian(x)? * m))
}

/// Fundamental matrix `Ẏ = −Y J(x(t))ᵀ`, `Y(0) = I`, where `J` is the
/// Jacobian of `b₀`.
pub fn fundamental_matrix_y(b0_jac: &dyn JacobianField, traj: &TrajectoryRecord) -> Result<MatrixPath> {
    let n = traj.states[0].len();
    integrate_matrix_along(traj, DMatrix::identity(n, n), |x, m| {
        Ok(-(m * b0_jac.jacobian(x)?.transpose()))
    })
}

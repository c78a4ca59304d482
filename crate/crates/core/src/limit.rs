//! Gaussian limit of the rescaled exit pair `ε⁻¹(τ_ε − T, X_ε(τ_ε) − z)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_to_exit, variational_matrix, JacobianField, MatrixPath};
use crate::error::{check_dim, Error, Result};
use crate::geometry::Domain;

/// Serialises a matrix as nested row arrays.
pub mod mat_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitLaw {
    #[serde(rename = "T")]
    pub t_exit: f64,
    pub z: Vec<f64>,
    pub b0bar_z: Vec<f64>,
    /// Outward unit normal of Γ.
    pub normal: Vec<f64>,
    /// Orthonormal tangent vectors of Γ.
    pub basis: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_phi", with = "mat_rows")]
    pub sigma_phi: DMatrix<f64>,
    #[serde(rename = "P", with = "mat_rows")]
    pub p: DMatrix<f64>,
    #[serde(rename = "Sigma_limit", with = "mat_rows")]
    pub sigma_limit: DMatrix<f64>,
}

impl LimitLaw {
    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// `Σ_φ = Φ(T) [∫₀ᵀ Φ⁻¹ a Φ⁻ᵀ ds] Φ(T)ᵀ`, Simpson's rule on each stored step.
pub fn phi_covariance(phi: &MatrixPath, a: &dyn Fn(f64) -> DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = phi.mats.first().map_or(0, |m| m.nrows());
    if n == 0 || phi.times.len() != phi.mats.len() || phi.mids.len() + 1 != phi.mats.len() {
        return Err(Error::InvalidInput("malformed matrix path".into()));
    }
    let integrand = |m: &DMatrix<f64>, t: f64| -> Result<DMatrix<f64>> {
        let det = m.determinant();
        if !(det.abs() >= 1e-12) {
            return Err(Error::SingularPhi { det });
        }
        let inv = m.clone().try_inverse().ok_or(Error::SingularPhi { det })?;
        let at = a(t);
        check_dim(n, at.nrows())?;
        Ok(&inv * at * inv.transpose())
    };
    let mut acc = DMatrix::zeros(n, n);
    let mut f_prev = integrand(&phi.mats[0], phi.times[0])?;
    for i in 0..phi.mids.len() {
        let (t0, t1) = (phi.times[i], phi.times[i + 1]);
        let h = t1 - t0;
        let f_mid = integrand(&phi.mids[i], t0 + 0.5 * h)?;
        let f_next = integrand(&phi.mats[i + 1], t1)?;
        acc += (&f_prev + f_mid * 4.0 + &f_next) * (h / 6.0);
        f_prev = f_next;
    }
    let end = phi.last();
    let s = end * acc * end.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `P = diag(−1, 1, …, 1) · [b̄₀(z) | t₁ | … ]⁻¹`.
pub fn projection_matrix(b0bar_z: &[f64], tangents: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = b0bar_z.len();
    check_dim(n - 1, tangents.len())?;
    let b = DMatrix::from_fn(n, n, |i, j| if j == 0 { b0bar_z[i] } else { tangents[j - 1][i] });
    let det = b.determinant();
    if !(det.abs() >= 1e-10) {
        return Err(Error::NonTransversal { normal_component: det });
    }
    let mut p = b.try_inverse().ok_or(Error::NonTransversal { normal_component: det })?;
    p.row_mut(0).neg_mut();
    Ok(p)
}

/// Flows `x0` under `b̄₀` to Γ and assembles the limit covariance.
pub fn build_limit_law(
    b0bar: &dyn JacobianField,
    a: &DMatrix<f64>,
    x0: &[f64],
    domain: &Domain,
    dt: f64,
    t_max: f64,
) -> Result<LimitLaw> {
    let n = domain.dim();
    check_dim(n, x0.len())?;
    check_dim(n, a.nrows())?;
    let traj = flow_to_exit(b0bar, x0, domain, dt, t_max)?;
    if traj.exit_face != domain.gamma() {
        return Err(Error::NotOnGamma);
    }
    let z = traj.exit_point.clone();
    let frame = domain.gamma_frame(&z)?;
    let mut b0bar_z = vec![0.0; n];
    b0bar.eval(&z, &mut b0bar_z)?;
    let outward: f64 = b0bar_z.iter().zip(&frame.normal).map(|(x, y)| x * y).sum();
    if !(outward > 0.0) {
        return Err(Error::NonTransversal { normal_component: outward });
    }
    let phi = variational_matrix(b0bar, &traj)?;
    let sigma_phi = phi_covariance(&phi, &|_| a.clone())?;
    let p = projection_matrix(&b0bar_z, &frame.tangents)?;
    let s = &p * &sigma_phi * p.transpose();
    let sigma_limit = (&s + s.transpose()) * 0.5;
    Ok(LimitLaw {
        t_exit: traj.exit_time,
        z,
        b0bar_z,
        normal: frame.normal,
        basis: frame.tangents,
        sigma_phi,
        p,
        sigma_limit,
    })
}

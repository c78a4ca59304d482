//! Euler–Maruyama simulation of `dX = b(X) dt + ε s dW` absorbed at `∂O`.

use serde::{Deserialize, Serialize};

use crate::dynamics::VectorField;
use crate::error::{check_dim, Error, Result};
use crate::geometry::{Domain, Face};
use crate::rng::RngStream;

/// States farther than this from the origin (max-norm) abort the path.
pub const BLOWUP_RADIUS: f64 = 1e6;

/// Crossing probabilities below this are treated as zero, so no uniform is
/// drawn for steps far from the boundary.
const BRIDGE_MIN_PROB: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub eps: f64,
    pub dt: f64,
    pub t_max: f64,
    /// σ = sigma_scale · I, so a = sigma_scale² · I.
    pub sigma_scale: f64,
    /// Test for an unobserved boundary excursion between grid times with the
    /// Brownian-bridge crossing probability of each face.
    #[serde(default = "default_bridge")]
    pub bridge: bool,
}

fn default_bridge() -> bool {
    true
}

impl SimConfig {
    pub fn new(eps: f64, dt: f64, t_max: f64) -> Self {
        Self {
            eps,
            dt,
            t_max,
            sigma_scale: 1.0,
            bridge: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // eps = 0 is accepted: it gives the deterministic Euler path.
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidInput("sim.eps must be ≥ 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidInput("sim.dt must be > 0".into()));
        }
        if !(self.t_max >= self.dt) {
            return Err(Error::InvalidInput("sim.t_max must be ≥ sim.dt".into()));
        }
        if !(self.sigma_scale > 0.0) {
            return Err(Error::InvalidInput("sim.sigma_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Standard deviation of one coordinate increment of the noise.
    pub fn noise_sd(&self) -> f64 {
        self.eps * self.sigma_scale * self.dt.sqrt()
    }
}

/// Outcome of one simulated path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitSample {
    pub tau: Option<f64>,
    pub exit_point: Option<Vec<f64>>,
    pub face: Option<Face>,
    pub truncated: bool,
    pub steps: u64,
}

impl ExitSample {
    pub fn exited_through(&self, face: Face) -> bool {
        !self.truncated && self.face == Some(face)
    }
}

/// Simulates one path from `x0` until it leaves `domain` or `cfg.t_max`.
pub fn simulate_exit(
    drift: &dyn VectorField,
    cfg: &SimConfig,
    x0: &[f64],
    domain: &Domain,
    stream: &mut RngStream,
) -> Result<ExitSample> {
    simulate_exit_observed(drift, cfg, x0, domain, stream, None).map(|(s, _)| s)
}

/// As [`simulate_exit`], additionally returning the state at time
/// `observe_at` (rounded to the step grid). Paths absorbed earlier report
/// their exit point, i.e. the stopped process.
pub fn simulate_exit_observed(
    drift: &dyn VectorField,
    cfg: &SimConfig,
    x0: &[f64],
    domain: &Domain,
    stream: &mut RngStream,
    observe_at: Option<f64>,
) -> Result<(ExitSample, Option<Vec<f64>>)> {
    let n = domain.dim();
    check_dim(n, x0.len())?;
    check_dim(n, drift.dim())?;
    cfg.validate()?;
    if !domain.contains_unchecked(x0) {
        return Err(Error::InvalidInput(format!("initial point {x0:?} is not interior")));
    }
    let observe_step = observe_at.map(|t| (t / cfg.dt).round() as u64);
    let mut observed = match observe_step {
        Some(0) => Some(x0.to_vec()),
        _ => None,
    };

    let faces = domain.faces();
    let sd = cfg.noise_sd();
    let dt = cfg.dt;
    // 2 / (ε² s² dt), the exponent scale of the bridge crossing probability.
    let bridge_rate = if cfg.bridge && sd > 0.0 { 2.0 / (sd * sd) } else { 0.0 };
    let max_steps = (cfg.t_max / dt).ceil() as u64;

    let mut x = x0.to_vec();
    let mut next = vec![0.0; n];
    let mut b = vec![0.0; n];
    for step in 0..max_steps {
        let t = step as f64 * dt;
        drift.eval(&x, &mut b)?;
        for i in 0..n {
            let noise = if sd > 0.0 { sd * stream.normal() } else { 0.0 };
            next[i] = x[i] + b[i] * dt + noise;
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_RADIUS) {
            return Err(Error::NonFinite { t: t + dt });
        }

        let mut exit = domain.crossing_unchecked(&x, &next);
        if exit.is_none() && bridge_rate > 0.0 {
            exit = bridge_exit(domain, &faces, &x, &next, bridge_rate, stream);
        }
        if let Some(c) = exit {
            let tau = t + c.theta * dt;
            if observed.is_none() && observe_step.is_some() {
                observed = Some(c.point.clone());
            }
            return Ok((
                ExitSample {
                    tau: Some(tau),
                    exit_point: Some(c.point),
                    face: Some(c.face),
                    truncated: false,
                    steps: step + 1,
                },
                observed,
            ));
        }
        std::mem::swap(&mut x, &mut next);
        if observe_step == Some(step + 1) {
            observed = Some(x.clone());
        }
    }
    if observed.is_none() && observe_step.is_some() {
        observed = Some(x.clone());
    }
    Ok((
        ExitSample {
            tau: None,
            exit_point: None,
            face: None,
            truncated: true,
            steps: max_steps,
        },
        observed,
    ))
}

/// Checks for a boundary excursion between two interior grid states.
///
/// For each face the probability that a Brownian bridge between the two
/// states touches the face plane is `exp(−2 d₀ d₁ / (ε² s² dt))`. A single
/// uniform decides whether any face was touched; the most likely face is
/// reported, at the point where the straight segment is closest to it.
fn bridge_exit(
    domain: &Domain,
    faces: &[Face],
    x: &[f64],
    next: &[f64],
    rate: f64,
    stream: &mut RngStream,
) -> Option<crate::geometry::Crossing> {
    let mut survive = 1.0;
    let mut best: Option<(f64, Face, f64, f64)> = None;
    for &face in faces {
        let d0 = domain.face_distance(x, face);
        let d1 = domain.face_distance(next, face);
        let p = (-rate * d0 * d1).exp();
        if p < BRIDGE_MIN_PROB {
            continue;
        }
        survive *= 1.0 - p;
        if best.is_none_or(|(bp, ..)| p > bp) {
            best = Some((p, face, d0, d1));
        }
    }
    let (_, face, d0, d1) = best?;
    if stream.uniform() >= 1.0 - survive {
        return None;
    }
    let theta = d0 / (d0 + d1);
    Some(crate::geometry::Crossing {
        theta,
        point: domain.hit_point(x, next, theta, face),
        face,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DriftFieldModel;
    use crate::geometry::Side;
    use crate::rng::make_stream;

    fn half_plane() -> Domain {
        Domain::half_space(2, 0, 0.0, Side::Lower).unwrap()
    }

    #[test]
    fn deterministic_limit_hits_straight_line_exit() {
        let drift = DriftFieldModel::constant(vec![-1.0, 0.5]).unwrap();
        let cfg = SimConfig { eps: 0.0, ..SimConfig::new(0.0, 1e-3, 5.0) };
        let s = simulate_exit(&drift, &cfg, &[1.0, 0.0], &half_plane(), &mut make_stream(1, 0)).unwrap();
        assert!((s.tau.unwrap() - 1.0).abs() <= 1e-3);
        let p = s.exit_point.unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn no_noise_no_exit() {
        let drift = DriftFieldModel::constant(vec![1.0, 0.0]).unwrap();
        let cfg = SimConfig::new(0.0, 1e-3, 2.0);
        let s = simulate_exit(&drift, &cfg, &[0.5, 0.0], &half_plane(), &mut make_stream(1, 0)).unwrap();
        assert!(s.truncated);
        assert!(s.tau.is_none() && s.exit_point.is_none() && s.face.is_none());
    }

    #[test]
    fn blowup_is_reported() {
        let drift = DriftFieldModel::constant(vec![1e9, 0.0]).unwrap();
        let cfg = SimConfig::new(0.0, 1e-2, 1.0);
        let r = simulate_exit(&drift, &cfg, &[0.5, 0.0], &half_plane(), &mut make_stream(1, 0));
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn same_stream_same_path() {
        let drift = DriftFieldModel::constant(vec![-1.0, 0.5]).unwrap();
        let cfg = SimConfig::new(0.2, 1e-3, 5.0);
        let a = simulate_exit(&drift, &cfg, &[0.3, 0.0], &half_plane(), &mut make_stream(9, 3)).unwrap();
        let b = simulate_exit(&drift, &cfg, &[0.3, 0.0], &half_plane(), &mut make_stream(9, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observation_of_stopped_path() {
        let drift = DriftFieldModel::constant(vec![-1.0, 0.0]).unwrap();
        let cfg = SimConfig::new(0.0, 1e-3, 5.0);
        let (s, obs) = simulate_exit_observed(
            &drift,
            &cfg,
            &[0.1, 0.0],
            &half_plane(),
            &mut make_stream(0, 0),
            Some(0.5),
        )
        .unwrap();
        assert_eq!(obs.unwrap(), s.exit_point.unwrap());
        let (_, obs0) = simulate_exit_observed(
            &drift,
            &cfg,
            &[0.1, 0.0],
            &half_plane(),
            &mut make_stream(0, 0),
            Some(0.0),
        )
        .unwrap();
        assert_eq!(obs0.unwrap(), vec![0.1, 0.0]);
    }
}

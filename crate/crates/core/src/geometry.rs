//! Domains with a flat exit patch Γ.
//!
//! Two shapes are supported: a half-space `{x_k > c}` (or `{x_k < c}`) whose
//! whole boundary hyperplane is Γ, and an axis-aligned box with one face
//! designated as Γ. Both keep Γ inside a single hyperplane with the interior
//! strictly on one side of it.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Tolerance used to decide that a point lies on a boundary hyperplane.
pub const ON_BOUNDARY_TOL: f64 = 1e-12;

/// Which side of the interior a face sits on along its axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Face at the low end of the axis; the interior lies at larger `x_k`.
    Lower,
    /// Face at the high end of the axis; the interior lies at smaller `x_k`.
    Upper,
}

impl Side {
    /// Sign of the outward normal along the face axis.
    pub fn outward_sign(self) -> f64 {
        match self {
            Side::Lower => -1.0,
            Side::Upper => 1.0,
        }
    }
}

/// A boundary face, identified by its normal axis and side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

impl Face {
    pub fn new(axis: usize, side: Side) -> Self {
        Self { axis, side }
    }
}

impl std::fmt::Display for Face {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let side = match self.side {
            Side::Lower => "lo",
            Side::Upper => "hi",
        };
        write!(f, "x{}{}", self.axis + 1, side)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DomainKind {
    /// Half-space bounded by the hyperplane `x_axis = level`; Γ is the whole
    /// hyperplane.
    HalfSpace { level: f64 },
    /// Axis-aligned box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    dim: usize,
    kind: DomainKind,
    gamma: Face,
}

/// Result of a segment leaving the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Crossing {
    /// Fraction of the segment travelled before the boundary is reached.
    pub theta: f64,
    pub point: Vec<f64>,
    pub face: Face,
}

/// Outward normal and an orthonormal tangent basis of Γ.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaFrame {
    pub normal: Vec<f64>,
    pub tangents: Vec<Vec<f64>>,
}

impl Domain {
    /// Half-space in `dim` dimensions with Γ = `{x_axis = level}`.
    ///
    /// `side` gives the position of Γ relative to the interior, so
    /// `Side::Lower` means the interior is `{x_axis > level}`.
    pub fn half_space(dim: usize, axis: usize, level: f64, side: Side) -> Result<Self> {
        if dim == 0 || axis >= dim {
            return Err(Error::InvalidInput(format!(
                "half-space axis {axis} out of range for dimension {dim}"
            )));
        }
        if !level.is_finite() {
            return Err(Error::InvalidInput("half-space level must be finite".into()));
        }
        Ok(Self {
            dim,
            kind: DomainKind::HalfSpace { level },
            gamma: Face::new(axis, side),
        })
    }

    /// Box `[lo, hi]` with the exit patch on `gamma`.
    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>, gamma: Face) -> Result<Self> {
        let dim = lo.len();
        if dim == 0 || hi.len() != dim {
            return Err(Error::InvalidInput(
                "box corners must be non-empty and of equal dimension".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidInput(
                "box lower corner must be strictly below the upper corner".into(),
            ));
        }
        if gamma.axis >= dim {
            return Err(Error::InvalidInput(format!(
                "gamma axis {} out of range for dimension {dim}",
                gamma.axis
            )));
        }
        Ok(Self {
            dim,
            kind: DomainKind::Box { lo, hi },
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    pub fn gamma(&self) -> Face {
        self.gamma
    }

    pub fn is_gamma(&self, face: Face) -> bool {
        face == self.gamma
    }

    /// Coordinate of the hyperplane carrying `face`.
    pub fn face_level(&self, face: Face) -> f64 {
        match &self.kind {
            DomainKind::HalfSpace { level } => *level,
            DomainKind::Box { lo, hi } => match face.side {
                Side::Lower => lo[face.axis],
                Side::Upper => hi[face.axis],
            },
        }
    }

    pub fn gamma_level(&self) -> f64 {
        self.face_level(self.gamma)
    }

    /// All faces of the domain in a fixed order (axis-major, lower first).
    pub fn faces(&self) -> Vec<Face> {
        match &self.kind {
            DomainKind::HalfSpace { .. } => vec![self.gamma],
            DomainKind::Box { .. } => (0..self.dim)
                .flat_map(|k| [Face::new(k, Side::Lower), Face::new(k, Side::Upper)])
                .collect(),
        }
    }

    /// Signed distance from `x` to the plane of `face`, positive on the
    /// interior side.
    #[inline]
    pub fn face_distance(&self, x: &[f64], face: Face) -> f64 {
        let level = self.face_level(face);
        match face.side {
            Side::Lower => x[face.axis] - level,
            Side::Upper => level - x[face.axis],
        }
    }

    /// Open-interior membership.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        check_dim(self.dim, x.len())?;
        Ok(self.contains_unchecked(x))
    }

    #[inline]
    pub(crate) fn contains_unchecked(&self, x: &[f64]) -> bool {
        match &self.kind {
            DomainKind::HalfSpace { level } => {
                let k = self.gamma.axis;
                match self.gamma.side {
                    Side::Lower => x[k] > *level,
                    Side::Upper => x[k] < *level,
                }
            }
            DomainKind::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(xi, (l, h))| xi > l && xi < h),
        }
    }

    /// First point where the segment `x_prev → x_next` meets the boundary.
    ///
    /// `x_prev` is assumed interior. Returns `None` when `x_next` is still
    /// interior. When two faces are reached at the same parameter the non-Γ
    /// face wins, so box corners never count as exits through Γ.
    pub fn boundary_crossing(&self, x_prev: &[f64], x_next: &[f64]) -> Result<Option<Crossing>> {
        check_dim(self.dim, x_prev.len())?;
        check_dim(self.dim, x_next.len())?;
        Ok(self.crossing_unchecked(x_prev, x_next))
    }

    pub(crate) fn crossing_unchecked(&self, x_prev: &[f64], x_next: &[f64]) -> Option<Crossing> {
        if self.contains_unchecked(x_next) {
            return None;
        }
        let mut best: Option<(f64, Face)> = None;
        for face in self.faces() {
            let d_next = self.face_distance(x_next, face);
            if d_next > 0.0 {
                continue;
            }
            let d_prev = self.face_distance(x_prev, face);
            let theta = if d_prev <= 0.0 {
                0.0
            } else {
                (d_prev / (d_prev - d_next)).clamp(0.0, 1.0)
            };
            best = match best {
                None => Some((theta, face)),
                Some((t, f)) => {
                    if theta < t || (theta == t && f == self.gamma && face != self.gamma) {
                        Some((theta, face))
                    } else {
                        Some((t, f))
                    }
                }
            };
        }
        let (theta, face) = best?;
        Some(Crossing {
            theta,
            point: self.hit_point(x_prev, x_next, theta, face),
            face,
        })
    }

    /// Point at parameter `theta` on the segment, snapped onto `face`.
    pub(crate) fn hit_point(&self, x_prev: &[f64], x_next: &[f64], theta: f64, face: Face) -> Vec<f64> {
        let mut point: Vec<f64> = x_prev
            .iter()
            .zip(x_next)
            .map(|(a, b)| a + theta * (b - a))
            .collect();
        point[face.axis] = self.face_level(face);
        if let DomainKind::Box { lo, hi } = &self.kind {
            for (k, xk) in point.iter_mut().enumerate() {
                if k != face.axis {
                    *xk = xk.clamp(lo[k], hi[k]);
                }
            }
        }
        point
    }

    /// Whether `z` lies on Γ (including its relative boundary for boxes).
    pub fn on_gamma(&self, z: &[f64]) -> Result<bool> {
        check_dim(self.dim, z.len())?;
        let k = self.gamma.axis;
        if (z[k] - self.gamma_level()).abs() > ON_BOUNDARY_TOL {
            return Ok(false);
        }
        Ok(match &self.kind {
            DomainKind::HalfSpace { .. } => true,
            DomainKind::Box { lo, hi } => (0..self.dim)
                .filter(|&i| i != k)
                .all(|i| z[i] >= lo[i] - ON_BOUNDARY_TOL && z[i] <= hi[i] + ON_BOUNDARY_TOL),
        })
    }

    /// Outward unit normal.
    pub fn gamma_normal(&self) -> Vec<f64> {
        let mut nu = vec![0.0; self.dim];
        nu[self.gamma.axis] = self.gamma.side.outward_sign();
        nu
    }

    /// Coordinate axes spanning the tangent hyperplane of Γ, ascending.
    pub fn tangent_axes(&self) -> Vec<usize> {
        (0..self.dim).filter(|&i| i != self.gamma.axis).collect()
    }

    /// Outward normal and tangent basis at a point of Γ.
    pub fn gamma_frame(&self, z: &[f64]) -> Result<GammaFrame> {
        if !self.on_gamma(z)? {
            return Err(Error::NotOnGamma);
        }
        let tangents = self
            .tangent_axes()
            .into_iter()
            .map(|i| {
                let mut t = vec![0.0; self.dim];
                t[i] = 1.0;
                t
            })
            .collect();
        Ok(GammaFrame {
            normal: self.gamma_normal(),
            tangents,
        })
    }
}

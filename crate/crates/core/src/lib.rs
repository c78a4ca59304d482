//! Numerics for small-noise diffusion exit problems conditioned on leaving
//! through a flat boundary patch.
//!
//! The pieces fit together as follows:
//!
//! * [`geometry`] describes the domain and its exit patch Γ.
//! * [`dynamics`] holds drift models, deterministic flows and the
//!   matrix-valued variational equations.
//! * [`sim`] and [`rng`] run Euler–Maruyama paths with absorption.
//! * [`conditioning`] conditions on exit through Γ, either by rejection or by
//!   the Doob h-transform drift `b + ε² a Dh/h`.
//! * [`characteristics`] builds the inviscid HJB solution `v⁰`, its gradient,
//!   the limiting drift `b − Dv⁰` and the `ε²` correction `v₁`.
//! * [`elliptic`] solves the linear exit-probability equation on grids and
//!   extracts `v^ε = −ε² log h^ε`.
//! * [`limit`] assembles the Gaussian limit law of the rescaled exit pair.
//! * [`stats`] rescales samples and compares them with the limit law.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod characteristics;
pub mod conditioning;
pub mod dynamics;
pub mod elliptic;
pub mod error;
pub mod geometry;
pub mod limit;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};

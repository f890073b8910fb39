//! Numerical laboratory for asymptotically almost periodic mild solutions of
//! parabolic equations on real hyperbolic space ℍ^d.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: geodesic-polar radial grids and L^p norms on ℍ^d.
//! * [`heat_kernel`]: closed-form heat kernels and the shifted heat semigroup
//!   `e^{-tA}`, `A = -(Δ - (d-1))`, acting on radial fields.
//! * [`semigroup`]: the dispersive-semigroup contract (decay rates σ, β, α, θ)
//!   and its concrete instances.
//! * [`aap`]: almost periodic, vanishing and asymptotically almost periodic
//!   forcing terms.
//! * [`mild`]: Duhamel and whole-line solutions, the AP/C₀ splitting check,
//!   and the Volterra comparison equation.
//! * [`fixed_point`]: Picard iteration for semilinear problems and the
//!   exponential-stability experiment.
//! * [`applications`]: Navier–Stokes and power-type heat nonlinearities.
//! * [`cli`]: JSON-configured batch runs behind the `hyperaap` binary.

// `!(x > 0.0)` is the NaN-rejecting form used throughout argument checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tabulated constants keep their published digits.
#![allow(clippy::excessive_precision)]

pub mod aap;
pub mod applications;
pub mod cli;
pub mod exec;
pub mod fixed_point;
pub mod geometry;
pub mod heat_kernel;
pub mod mild;
pub mod quadrature;
pub mod report;
pub mod semigroup;
pub mod special;

pub use exec::Execution;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "quadrature did not converge: estimated error {achieved:.3e} (requested {requested:.3e})"
    )]
    Quadrature { achieved: f64, requested: f64 },

    #[error("field does not decay at the grid cutoff: |u| = {value:.3e} exceeds {threshold:.1e}")]
    CutoffDecay { value: f64, threshold: f64 },

    #[error("ill-conditioned least-squares fit (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("iterate left the ball at t = {time}: norm {norm:.6e} > radius {radius:.6e}")]
    BallExit { time: f64, norm: f64, radius: f64 },

    #[error("iteration is not contracting at step {iteration}: ratio {ratio:.6e}")]
    NonContraction { iteration: usize, ratio: f64 },

    #[error("iteration did not converge after {iterations} steps (last distance {distance:.3e})")]
    NotConverged { iterations: usize, distance: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

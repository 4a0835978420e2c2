//! Negative imaginary (NI) output-feedback synthesis.
//!
//! The crate builds strictly proper dynamic compensators that render an
//! uncertain LTI plant negative imaginary in closed loop. The controller is
//! assembled from a state-feedback Riccati solution and a dual
//! output-injection Riccati solution, each obtained from an ordered real
//! Schur decomposition plus two Lyapunov solves. Every certificate the
//! construction produces (P, Z, V, Σ and the coupling radius ρ(ZP)) can be
//! re-verified numerically with the analysis routines.
//!
//! Module map:
//!
//! - [`matrix`]: eigenvalues, ordered real Schur form, Lyapunov solves,
//!   PSD tests and other dense kernels.
//! - [`ss`]: state-space realizations, the uncertain plant, closed loops
//!   and frequency response.
//! - [`riccati`]: quadratic residual evaluation and Newton solvers for the
//!   NI Riccati equations.
//! - [`analysis`]: NI / SNI / positive-real checks and ARE certificates.
//! - [`synthesis`]: state feedback, output injection, controller assembly
//!   and the necessity-direction extraction.

pub mod analysis;
pub mod error;
pub mod fixtures;
pub mod matrix;
pub mod riccati;
pub mod ss;
pub mod synthesis;
pub mod tol;

pub use error::{Error, Result};
pub use matrix::Mat;
pub use tol::{Residual, Tolerances};

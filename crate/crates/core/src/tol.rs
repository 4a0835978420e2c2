//! Tolerances and relative residuals.

/// Absolute floor added to every relative residual test so that exact-zero
/// solutions (P = 0, Z = 0) pass.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Numerical thresholds used across the crate. All of them are decisions of
/// this implementation, so they are carried explicitly and echoed in reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative tolerance on Riccati / Lyapunov residuals.
    pub residual: f64,
    /// Eigenvalue tolerance of PSD / PD decisions.
    pub psd: f64,
    /// Tolerance on the frequency-domain NI margin.
    pub freq: f64,
    /// Stable / anti-stable split of the ordered Schur form.
    pub order: f64,
    /// Condition-number ceiling for linear solves.
    pub max_cond: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual: 1e-8,
            psd: 1e-9,
            freq: 1e-8,
            order: 1e-9,
            max_cond: 1e12,
        }
    }
}

impl Tolerances {
    pub fn with_residual(mut self, residual: f64) -> Self {
        self.residual = residual;
        self
    }
}

/// Frobenius norm of a matrix expression together with the summed norms of
/// the terms it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residual {
    pub norm: f64,
    pub scale: f64,
}

impl Residual {
    pub fn new(norm: f64, scale: f64) -> Self {
        Self { norm, scale }
    }

    /// `norm / scale`, or 0 when the expression vanished identically.
    pub fn relative(&self) -> f64 {
        if self.norm == 0.0 {
            0.0
        } else if self.scale > 0.0 {
            self.norm / self.scale
        } else {
            f64::INFINITY
        }
    }

    /// `norm <= tol * scale + RESIDUAL_FLOOR`.
    pub fn within(&self, tol: f64) -> bool {
        self.norm <= tol * self.scale + RESIDUAL_FLOOR
    }
}

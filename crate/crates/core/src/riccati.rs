//! Quadratic matrix equations of negative-imaginary type.
//!
//! Every equation handled here has one of two shapes in the data
//! `(A, B, C_A, R)`:
//!
//! * primal: `X A + Aᵀ X + (C_A − Bᵀ X)ᵀ R⁻¹ (C_A − Bᵀ X) = 0`
//! * dual:   `X Aᵀ + A X + (B − X C_Aᵀ) R⁻¹ (B − X C_Aᵀ)ᵀ = 0`
//!
//! The dual shape is the primal one for `(Aᵀ, C_Aᵀ, Bᵀ)`, which is how the
//! solver treats it. [`AreKind`] names which published equation a problem
//! instance came from; the constructors fix the term arrangement.

use crate::error::{Error, Result};
use crate::matrix::{
    fro, psd_margin, real_schur_ordered, solve_linear, solve_lyapunov, spectral_abscissa,
    symmetrize, Mat,
};
use crate::ss::{ClosedLoop, StateSpace, UncertainPlant};
use crate::tol::{Residual, Tolerances};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AreKind {
    /// `PA + AᵀP + (CA − BᵀP)ᵀR⁻¹(CA − BᵀP) = 0`
    NiPrimal,
    /// `ZAᵀ + AZ + (B − ZAᵀCᵀ)R⁻¹(Bᵀ − CAZ) = 0`
    NiDual,
    /// Same equation as [`AreKind::NiPrimal`], solution required positive definite.
    SniPrimal,
    /// Same equation as [`AreKind::NiDual`], solution required positive definite.
    SniDual,
    /// `P Ã + ÃᵀP + Q̃ᵀR⁻¹Q̃`, `Ã = A + B2F`, `Q̃ = C1Ã − B1ᵀP`.
    ConditionA,
    /// `Z Āᵀ + ĀZ + Q̄R⁻¹Q̄ᵀ`, `Ā = A + LC2`, `Q̄ = B1 + LD21 − ZAᵀC1ᵀ`.
    ConditionB,
    /// `Σ A_cl + A_clᵀΣ + (C_cl A_cl − B_clᵀΣ)ᵀR⁻¹(C_cl A_cl − B_clᵀΣ)`.
    ClosedLoop,
    /// `V A_v + A_vᵀV + Q_vᵀR⁻¹Q_v`, `A_v = A_e + L_eC_e2`,
    /// `Q_v = −C_e1 − (B1 + L_eD21)ᵀV`.
    VForm,
}

impl AreKind {
    pub fn is_dual(self) -> bool {
        matches!(
            self,
            AreKind::NiDual | AreKind::SniDual | AreKind::ConditionB
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AreKind::NiPrimal => "ni-primal",
            AreKind::NiDual => "ni-dual",
            AreKind::SniPrimal => "sni-primal",
            AreKind::SniDual => "sni-dual",
            AreKind::ConditionA => "condition-a",
            AreKind::ConditionB => "condition-b",
            AreKind::ClosedLoop => "closed-loop",
            AreKind::VForm => "v-form",
        }
    }
}

/// One instance of a primal or dual NI-type Riccati equation.
#[derive(Debug, Clone)]
pub struct AreProblem {
    pub kind: AreKind,
    pub a: Mat,
    pub b: Mat,
    pub c_a: Mat,
    pub r: Mat,
    r_inv: Mat,
}

/// Residual of the block split `[[X11, X12], [X21, X22]]` at `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockResiduals {
    pub x11: Residual,
    pub x21: Residual,
    pub x22: Residual,
}

impl AreProblem {
    pub fn new(kind: AreKind, a: Mat, b: Mat, c_a: Mat, r: Mat) -> Result<Self> {
        let n = a.nrows();
        let m = r.nrows();
        if !a.is_square() || b.shape() != (n, m) || c_a.shape() != (m, n) || !r.is_square() {
            return Err(Error::Dimension(format!(
                "inconsistent Riccati data: A {}x{}, B {}x{}, C_A {}x{}, R {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c_a.nrows(),
                c_a.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        let psd = psd_margin(&r, Tolerances::default().psd)
            .map_err(|_| Error::Domain("R is not symmetric".into()))?;
        if !psd.is_pd {
            return Err(Error::Domain(format!(
                "R = CB + BᵀCᵀ is not positive definite (smallest eigenvalue {:.6e})",
                psd.min_eig
            )));
        }
        let r_inv = solve_linear(&r, &Mat::identity(m, m))?;
        Ok(Self {
            kind,
            a,
            b,
            c_a,
            r,
            r_inv,
        })
    }

    /// Equation data for a square system `(A, B, C, D)`; `kind` must be one of
    /// the four NI/SNI kinds.
    pub fn for_system(kind: AreKind, sys: &StateSpace) -> Result<Self> {
        if !matches!(
            kind,
            AreKind::NiPrimal | AreKind::NiDual | AreKind::SniPrimal | AreKind::SniDual
        ) {
            return Err(Error::Domain(format!(
                "{} is not a system-level equation",
                kind.name()
            )));
        }
        let r = sys.r()?;
        Self::new(kind, sys.a.clone(), sys.b.clone(), &sys.c * &sys.a, r)
    }

    pub fn condition_a(plant: &UncertainPlant, f: &Mat) -> Result<Self> {
        if f.shape() != (plant.controls(), plant.states()) {
            return Err(Error::Dimension(format!(
                "F must be {}x{}",
                plant.controls(),
                plant.states()
            )));
        }
        let a_t = &plant.a + &plant.b2 * f;
        let c_a = &plant.c1 * &a_t;
        Self::new(AreKind::ConditionA, a_t, plant.b1.clone(), c_a, plant.r())
    }

    pub fn condition_b(plant: &UncertainPlant, l: &Mat) -> Result<Self> {
        if l.shape() != (plant.states(), plant.channels()) {
            return Err(Error::Dimension(format!(
                "L must be {}x{}",
                plant.states(),
                plant.channels()
            )));
        }
        let a_b = &plant.a + l * &plant.c2;
        let b = &plant.b1 + l * &plant.d21;
        let c_a = &plant.c1 * &plant.a;
        Self::new(AreKind::ConditionB, a_b, b, c_a, plant.r())
    }

    /// Closed-loop equation in `(x, x − xk)` coordinates.
    pub fn closed_loop(cl: &ClosedLoop) -> Result<Self> {
        Self::closed_loop_for(&cl.transformed(), cl.plant.r())
    }

    /// Closed-loop equation in the original `(x, xk)` coordinates.
    pub fn closed_loop_original(cl: &ClosedLoop) -> Result<Self> {
        Self::closed_loop_for(&cl.original(), cl.plant.r())
    }

    fn closed_loop_for(sys: &StateSpace, r: Mat) -> Result<Self> {
        let c_a = &sys.c * &sys.a;
        Self::new(AreKind::ClosedLoop, sys.a.clone(), sys.b.clone(), c_a, r)
    }

    pub fn v_form(a_v: Mat, b_v: Mat, c_e1: &Mat, r: Mat) -> Result<Self> {
        Self::new(AreKind::VForm, a_v, b_v, -c_e1, r)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn r_inv(&self) -> &Mat {
        &self.r_inv
    }

    fn terms(&self, x: &Mat) -> (Mat, Mat, Mat) {
        if self.kind.is_dual() {
            let q = &self.b - x * self.c_a.transpose();
            let quad = &q * &self.r_inv * q.transpose();
            (x * self.a.transpose(), &self.a * x, quad)
        } else {
            let q = &self.c_a - self.b.transpose() * x;
            let quad = q.transpose() * &self.r_inv * &q;
            (x * &self.a, self.a.transpose() * x, quad)
        }
    }

    pub fn residual_matrix(&self, x: &Mat) -> Result<Mat> {
        self.check_candidate(x)?;
        let (t1, t2, t3) = self.terms(x);
        Ok(t1 + t2 + t3)
    }

    pub fn residual(&self, x: &Mat) -> Result<Residual> {
        self.check_candidate(x)?;
        let (t1, t2, t3) = self.terms(x);
        let scale = fro(&t1) + fro(&t2) + fro(&t3);
        Ok(Residual {
            norm: fro(&(t1 + t2 + t3)),
            scale,
        })
    }

    /// Residuals of the `(1,1)`, `(2,1)` and `(2,2)` blocks for a split after
    /// the first `k` states, each scaled by the term norms of the whole
    /// equation. A block whose terms all vanish, such as `(2,1)` when the
    /// leading block of `X` is zero, would otherwise be scaled by roundoff.
    pub fn block_residuals(&self, x: &Mat, k: usize) -> Result<BlockResiduals> {
        self.check_candidate(x)?;
        let n = self.dim();
        if k > n {
            return Err(Error::Dimension(format!("split {k} exceeds dimension {n}")));
        }
        let (t1, t2, t3) = self.terms(x);
        let scale = fro(&t1) + fro(&t2) + fro(&t3);
        let total = t1 + t2 + t3;
        let block = |r0: usize, c0: usize, rn: usize, cn: usize| Residual {
            norm: fro(&total.view((r0, c0), (rn, cn)).into_owned()),
            scale,
        };
        Ok(BlockResiduals {
            x11: block(0, 0, k, k),
            x21: block(k, 0, n - k, k),
            x22: block(k, k, n - k, n - k),
        })
    }

    fn check_candidate(&self, x: &Mat) -> Result<()> {
        let n = self.dim();
        if x.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "candidate must be {n}x{n}, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        crate::matrix::ensure_finite(x, "candidate")
    }

    /// Expanded form `X Â + ÂᵀX + X G X + H = 0` in primal orientation.
    pub fn expanded(&self) -> (Mat, Mat, Mat) {
        let (a, b, c_a) = if self.kind.is_dual() {
            (self.a.transpose(), self.c_a.transpose(), self.b.transpose())
        } else {
            (self.a.clone(), self.b.clone(), self.c_a.clone())
        };
        let a_hat = &a - &b * &self.r_inv * &c_a;
        let g = symmetrize(&(&b * &self.r_inv * b.transpose()));
        let h = symmetrize(&(c_a.transpose() * &self.r_inv * &c_a));
        (a_hat, g, h)
    }

    /// The matrix whose spectrum the SNI side condition constrains:
    /// `A − BR⁻¹(C_A − BᵀX)` (primal) or `A − (B − XC_Aᵀ)R⁻¹C_A` (dual).
    pub fn side_condition_matrix(&self, x: &Mat) -> Mat {
        if self.kind.is_dual() {
            &self.a - (&self.b - x * self.c_a.transpose()) * &self.r_inv * &self.c_a
        } else {
            &self.a - &self.b * &self.r_inv * (&self.c_a - self.b.transpose() * x)
        }
    }
}

/// Outcome of a Newton–Kleinman run.
#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub x: Mat,
    pub iterations: usize,
    pub residual: Residual,
    /// Whether the iteration was started from a stabilizing guess other than zero.
    pub stabilized_start: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Relative residual at which iteration stops early.
    pub target: f64,
    /// Iterations without improvement after which iteration stops.
    pub patience: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            target: 1e-15,
            patience: 8,
        }
    }
}

/// Stabilizing solution of `X Â + ÂᵀX − X G X + Q = 0` from the stable
/// invariant subspace of the Hamiltonian `[[Â, −G], [−Q, −Âᵀ]]`.
pub fn stabilizing_care(a_hat: &Mat, g: &Mat, q: &Mat) -> Result<Mat> {
    let n = a_hat.nrows();
    let mut h = Mat::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a_hat);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a_hat.transpose()));
    let s = real_schur_ordered(&h, 0.0)?;
    if s.stable_dim != n {
        return Err(Error::NoConvergence("stabilizing Riccati solution"));
    }
    let u1 = s.u.view((0, 0), (n, n)).into_owned();
    let u2 = s.u.view((n, 0), (n, n)).into_owned();
    let x = solve_linear(&u1.transpose(), &u2.transpose())?.transpose();
    Ok(symmetrize(&x))
}

/// Solves the problem's Riccati equation by Newton–Kleinman iteration.
///
/// The iteration starts at zero when `Â` is Hurwitz and otherwise at the
/// negative of the stabilizing solution of `XÂ + ÂᵀX − XGX + I = 0`, so
/// that `Â + G P₀` is Hurwitz. Iterates are symmetrized after every step.
/// When the solution makes `Â + GX` singular the convergence is linear, so
/// the iteration keeps the best residual seen and stops on stagnation.
pub fn solve_newton(problem: &AreProblem, opts: NewtonOptions) -> Result<NewtonSolution> {
    let (a_hat, g, h) = problem.expanded();
    let n = a_hat.nrows();
    if n == 0 {
        return Ok(NewtonSolution {
            x: Mat::zeros(0, 0),
            iterations: 0,
            residual: Residual {
                norm: 0.0,
                scale: 0.0,
            },
            stabilized_start: false,
        });
    }
    let (p0, stabilized_start) = if spectral_abscissa(&a_hat)? < -1e-9 {
        (Mat::zeros(n, n), false)
    } else {
        (-stabilizing_care(&a_hat, &g, &Mat::identity(n, n))?, true)
    };
    newton_from(problem, &a_hat, &g, &h, p0, stabilized_start, opts)
}

fn newton_from(
    problem: &AreProblem,
    a_hat: &Mat,
    g: &Mat,
    h: &Mat,
    p0: Mat,
    stabilized_start: bool,
    opts: NewtonOptions,
) -> Result<NewtonSolution> {
    let mut p = p0;
    let mut best = (p.clone(), problem.residual(&p)?);
    let mut since_best = 0;
    let mut iterations = 0;
    for k in 1..=opts.max_iter {
        let closed = a_hat + g * &p;
        let rhs = h - &p * g * &p;
        let next = match solve_lyapunov(&closed.transpose(), &rhs) {
            Ok(x) => symmetrize(&x),
            Err(Error::SingularEquation(_)) if k > 1 => break,
            Err(e) => return Err(e),
        };
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        iterations = k;
        p = next;
        let res = problem.residual(&p)?;
        if res.relative() < best.1.relative() {
            best = (p.clone(), res);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if best.1.relative() <= opts.target || since_best >= opts.patience {
            break;
        }
    }
    if !best.0.iter().all(|v| v.is_finite()) {
        return Err(Error::NoConvergence("Newton-Kleinman iteration"));
    }
    Ok(NewtonSolution {
        x: best.0,
        iterations,
        residual: best.1,
        stabilized_start,
    })
}

/// Newton–Kleinman from a caller-supplied starting point.
pub fn solve_newton_from(
    problem: &AreProblem,
    p0: Mat,
    opts: NewtonOptions,
) -> Result<NewtonSolution> {
    let (a_hat, g, h) = problem.expanded();
    newton_from(problem, &a_hat, &g, &h, p0, false, opts)
}

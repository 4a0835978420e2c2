//! Output-feedback synthesis: state feedback from an ordered Schur form and
//! two Lyapunov solves, output injection by the dual construction, the
//! controller formulas, the closed-loop certificate `Σ = diag(P, V)`, and
//! extraction of `(P, Z, F, L)` from a certificate of a given loop.

use std::fmt;

use crate::analysis::{
    ni_freq_check, sni_freq_check, solution_psd_tol, FreqCheck, FreqGrid, NiFreqCheck,
};
use crate::error::{Error, Result};
use crate::matrix::{
    block_diag, fro, inverse, psd_margin, real_schur_ordered, solve_linear, solve_lyapunov,
    spectral_abscissa, spectral_radius, symmetrize, Mat, PsdReport,
};
use crate::riccati::{solve_newton, AreProblem, BlockResiduals, NewtonOptions};
use crate::ss::{
    build_closed_loop, c1b2_inverse, check_assumptions, minimality_check, ClosedLoop,
    DynamicController, UncertainPlant,
};
use crate::tol::{Residual, Tolerances};

/// `T − S` with smallest eigenvalue at or below this is refused.
pub const BOUNDARY_GAP: f64 = 1e-9;
/// `ρ(ZP)` must stay below `1 − STRICT_COUPLING` for synthesis.
pub const STRICT_COUPLING: f64 = 1e-12;
/// Slack on `ρ(ZP) ≤ 1` for certificates extracted from a given loop.
pub const WEAK_COUPLING: f64 = 1e-8;
/// Residual tolerance for conditions (a) and (b) after extraction.
pub const EXTRACTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Assumptions,
    StateFeedback,
    OutputInjection,
    Coupling,
    Controller,
    VConstruction,
    ClosedLoop,
    Frequency,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Assumptions => "assumptions",
            Stage::StateFeedback => "state-feedback",
            Stage::OutputInjection => "output-injection",
            Stage::Coupling => "coupling",
            Stage::Controller => "controller",
            Stage::VConstruction => "v-construction",
            Stage::ClosedLoop => "closed-loop",
            Stage::Frequency => "frequency",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// A standing assumption on the plant does not hold.
    Assumption,
    /// The plant is well posed but the construction has no solution.
    NoSolution,
    Numerical,
    Input,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage}: {message}")]
pub struct SynthesisError {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

impl SynthesisError {
    fn new(stage: Stage, kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
        }
    }

    fn from_error(stage: Stage, e: Error) -> Self {
        let kind = if e.is_numerical() {
            FailureKind::Numerical
        } else if matches!(e, Error::Certification(_)) {
            FailureKind::NoSolution
        } else {
            FailureKind::Input
        };
        Self::new(stage, kind, e.to_string())
    }
}

fn tag(stage: Stage) -> impl Fn(Error) -> SynthesisError {
    move |e| SynthesisError::from_error(stage, e)
}

/// `A_f = Uᵀ(A − B2(C1B2)⁻¹C1A)U` in ordered real Schur form with the blocks
/// of `B_f = Uᵀ(B2(C1B2)⁻¹ − B1R⁻¹)` and `B̃1 = UᵀB1`.
#[derive(Debug, Clone)]
pub struct SchurPartition {
    pub u: Mat,
    pub a11: Mat,
    pub a12: Mat,
    pub a22: Mat,
    pub bf1: Mat,
    pub bf2: Mat,
    pub b11: Mat,
    pub b22: Mat,
    pub r: Mat,
}

impl SchurPartition {
    pub fn stable_dim(&self) -> usize {
        self.a11.nrows()
    }

    pub fn states(&self) -> usize {
        self.u.nrows()
    }

    /// The full triangular factor `A_f`.
    pub fn a_f(&self) -> Mat {
        let k = self.stable_dim();
        let n = self.states();
        let mut t = Mat::zeros(n, n);
        t.view_mut((0, 0), (k, k)).copy_from(&self.a11);
        t.view_mut((0, k), (k, n - k)).copy_from(&self.a12);
        t.view_mut((k, k), (n - k, n - k)).copy_from(&self.a22);
        t
    }
}

/// Splits `A_f` after its closed-left-half-plane eigenvalues and `(B1, B2)`
/// conformally.
fn partition(a_f0: &Mat, b_f: &Mat, b1: &Mat, r: Mat) -> Result<SchurPartition> {
    let schur = real_schur_ordered(a_f0, Tolerances::default().order)?;
    let k = schur.stable_dim;
    let n = a_f0.nrows();
    let bf = schur.u.transpose() * b_f;
    let bt = schur.u.transpose() * b1;
    let rows = |m: &Mat, r0: usize, rn: usize| m.rows(r0, rn).into_owned();
    Ok(SchurPartition {
        a11: schur.t.view((0, 0), (k, k)).into_owned(),
        a12: schur.t.view((0, k), (k, n - k)).into_owned(),
        a22: schur.t.view((k, k), (n - k, n - k)).into_owned(),
        bf1: rows(&bf, 0, k),
        bf2: rows(&bf, k, n - k),
        b11: rows(&bt, 0, k),
        b22: rows(&bt, k, n - k),
        r,
        u: schur.u,
    })
}

pub fn schur_decompose_sf(plant: &UncertainPlant) -> Result<SchurPartition> {
    let m = c1b2_inverse(plant)?;
    let r = plant.r();
    let r_inv = positive_inverse(&r)?;
    let a_f0 = &plant.a - &plant.b2 * &m * &plant.c1 * &plant.a;
    let b_f = &plant.b2 * &m - &plant.b1 * &r_inv;
    partition(&a_f0, &b_f, &plant.b1, r)
}

fn positive_inverse(r: &Mat) -> Result<Mat> {
    let psd = psd_margin(r, Tolerances::default().psd)?;
    if !psd.is_pd {
        return Err(Error::Domain(format!(
            "R is not positive definite (smallest eigenvalue {:.6e})",
            psd.min_eig
        )));
    }
    inverse(r)
}

/// `T` and `S` from `−A22T − TA22ᵀ + B_f2RB_f2ᵀ = 0` and
/// `−A22S − SA22ᵀ + B22R⁻¹B22ᵀ = 0`, and the PSD margin of `T − S`.
pub fn solve_ts(sp: &SchurPartition) -> Result<(Mat, Mat, PsdReport)> {
    let r_inv = positive_inverse(&sp.r)?;
    let t = solve_lyapunov(&sp.a22, &-(&sp.bf2 * &sp.r * sp.bf2.transpose()))?;
    let s = solve_lyapunov(&sp.a22, &-(&sp.b22 * &r_inv * sp.b22.transpose()))?;
    let gap = psd_margin(&symmetrize(&(&t - &s)), BOUNDARY_GAP)?;
    Ok((t, s, gap))
}

/// `U · diag(0, (T − S)⁻¹) · Uᵀ` and the inner factor `P_f`.
fn assemble(sp: &SchurPartition, t: &Mat, s: &Mat) -> Result<(Mat, Mat)> {
    let n = sp.states();
    let k = sp.stable_dim();
    let mut p_f = Mat::zeros(n, n);
    if k < n {
        let inner = symmetrize(&inverse(&symmetrize(&(t - s)))?);
        p_f.view_mut((k, k), (n - k, n - k)).copy_from(&inner);
    }
    let p = symmetrize(&(&sp.u * &p_f * sp.u.transpose()));
    Ok((p, p_f))
}

#[derive(Debug, Clone)]
pub struct StateFeedbackSolution {
    pub k: Mat,
    pub p: Mat,
    pub t: Mat,
    pub s: Mat,
    pub p_f: Mat,
    pub partition: SchurPartition,
    pub gap: PsdReport,
    /// Condition (a) with `F = K`.
    pub residual: Residual,
}

pub fn synth_state_feedback(plant: &UncertainPlant) -> Result<StateFeedbackSolution> {
    let sp = schur_decompose_sf(plant)?;
    let (t, s, gap) = solve_ts(&sp)?;
    if !gap.is_pd {
        let what = if gap.min_eig.abs() <= BOUNDARY_GAP {
            "boundary"
        } else {
            "indefinite"
        };
        return Err(Error::Certification(format!(
            "T − S is {what} (smallest eigenvalue {:.6e}); no state feedback of this form exists",
            gap.min_eig
        )));
    }
    let (p, p_f) = assemble(&sp, &t, &s)?;
    let r = plant.r();
    let m = c1b2_inverse(plant)?;
    let b2t_c1t = (&plant.c1 * &plant.b2).transpose();
    let tail = &r * solve_linear(&b2t_c1t, &(plant.b2.transpose() * &p))?;
    let k = &m * (plant.b1.transpose() * &p - &plant.c1 * &plant.a - tail);
    let residual = AreProblem::condition_a(plant, &k)?.residual(&p)?;
    Ok(StateFeedbackSolution {
        k,
        p,
        t,
        s,
        p_f,
        partition: sp,
        gap,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionRoute {
    /// Schur/Lyapunov construction on the transposed equation.
    DualSchur,
    /// Newton iteration from `Z = 0`, where it is stationary. Accepted only
    /// when `A + LC2` has no eigenvalue in the open right half plane.
    ZeroFallback,
}

#[derive(Debug, Clone)]
pub struct OutputInjectionSolution {
    pub l: Mat,
    pub z: Mat,
    pub route: InjectionRoute,
    /// Condition (b).
    pub residual: Residual,
    /// Why the dual construction was not used, when it was not.
    pub fallback_reason: Option<String>,
}

/// `L` from `Z` for condition (b), with `D21` kept unsymmetrized.
fn injection_gain(plant: &UncertainPlant, z: &Mat) -> Result<Mat> {
    let r = plant.r();
    let d21t_inv_r = solve_linear(&plant.d21.transpose(), &r)?;
    let num = z * plant.a.transpose() * plant.c1.transpose()
        - &plant.b1
        - z * plant.c2.transpose() * d21t_inv_r;
    Ok(solve_linear(&plant.d21.transpose(), &num.transpose())?.transpose())
}

fn dual_injection(plant: &UncertainPlant) -> Result<(Mat, Mat, PsdReport)> {
    let r = plant.r();
    let r_inv = positive_inverse(&r)?;
    let c_hat = solve_linear(&plant.d21, &plant.c2)?;
    let at_c1t = plant.a.transpose() * plant.c1.transpose();
    let a_b = (&plant.a - &plant.b1 * &c_hat).transpose();
    let g2 = c_hat.transpose() - &at_c1t * &r_inv;
    let sp = partition(&a_b, &g2, &at_c1t, r)?;
    let (t, s, gap) = solve_ts(&sp)?;
    if !gap.is_pd {
        return Ok((Mat::zeros(0, 0), Mat::zeros(0, 0), gap));
    }
    let (z, _) = assemble(&sp, &t, &s)?;
    let l = injection_gain(plant, &z)?;
    Ok((z, l, gap))
}

pub fn synth_output_injection(plant: &UncertainPlant) -> Result<OutputInjectionSolution> {
    let tol = Tolerances::default();
    let reason = match dual_injection(plant) {
        Ok((_, _, gap)) if !gap.is_pd => {
            let what = if gap.min_eig.abs() <= BOUNDARY_GAP {
                "boundary"
            } else {
                "indefinite"
            };
            return Err(Error::Certification(format!(
                "dual T − S is {what} (smallest eigenvalue {:.6e}); no output injection of this form exists",
                gap.min_eig
            )));
        }
        Ok((z, l, _)) => {
            let residual = AreProblem::condition_b(plant, &l)?.residual(&z)?;
            if residual.within(tol.residual) {
                return Ok(OutputInjectionSolution {
                    l,
                    z,
                    route: InjectionRoute::DualSchur,
                    residual,
                    fallback_reason: None,
                });
            }
            format!("dual construction residual {:.3e}", residual.relative())
        }
        Err(e) if e.is_numerical() => format!("dual construction failed: {e}"),
        Err(e) => return Err(e),
    };
    let n = plant.states();
    let z = Mat::zeros(n, n);
    let l = injection_gain(plant, &z)?;
    let residual = AreProblem::condition_b(plant, &l)?.residual(&z)?;
    let abscissa = spectral_abscissa(&(&plant.a + &l * &plant.c2))?;
    if !residual.within(tol.residual) || abscissa > tol.order {
        return Err(Error::Certification(format!(
            "no output injection found ({reason}; at Z = 0 the residual is {:.3e} and A + LC2 has abscissa {abscissa:.3e})",
            residual.relative()
        )));
    }
    Ok(OutputInjectionSolution {
        l,
        z,
        route: InjectionRoute::ZeroFallback,
        residual,
        fallback_reason: Some(reason),
    })
}

/// `ρ(ZP)` with the strict and the relaxed test against one.
pub fn check_coupling(p: &Mat, z: &Mat) -> Result<(f64, bool, bool)> {
    let rho = spectral_radius(&(z * p))?;
    Ok((rho, rho < 1.0 - STRICT_COUPLING, rho <= 1.0 + WEAK_COUPLING))
}

/// Controller `(A_k, B_k, C_k)` from the certificates `(P, Z)` and gains
/// `(F, L)`.
pub fn build_controller(
    plant: &UncertainPlant,
    p: &Mat,
    z: &Mat,
    f: &Mat,
    l: &Mat,
) -> Result<DynamicController> {
    let n = plant.states();
    let i_zp = Mat::identity(n, n) - z * p;
    let j_l = solve_linear(&i_zp, l).map_err(|e| match e {
        Error::SingularMatrix { cond } => Error::Certification(format!(
            "I − ZP is singular (condition {cond:.3e}); condition (c) fails"
        )),
        e => e,
    })?;
    let r_inv = positive_inverse(&plant.r())?;
    let c_k = f.clone();
    let b_k = -&j_l;
    let a_t = &plant.a + &plant.b2 * &c_k;
    let q = &plant.c1 * &a_t - plant.b1.transpose() * p;
    let a_k = &a_t - &b_k * &plant.c2 - (&plant.b1 + &j_l * &plant.d21) * &r_inv * q;
    DynamicController::new(a_k, b_k, c_k)
}

/// Intermediates of the `V` construction and its solution.
#[derive(Debug, Clone)]
pub struct VConstruction {
    /// `W = Z(I − PZ)⁻¹`.
    pub w: Mat,
    pub a_w: Mat,
    pub r_z: Mat,
    pub r_w: Mat,
    pub a_e: Mat,
    pub c_e1: Mat,
    pub c_e2: Mat,
    pub l_e: Mat,
    pub q_e: Mat,
    pub v: Mat,
    pub q_v: Mat,
    pub residual_v: Residual,
    /// `A_wW + WA_wᵀ + WR_wW`.
    pub residual_w: Residual,
    /// `W(A_e + L_eC_e2)ᵀ + (A_e + L_eC_e2)W + Q_eR⁻¹Q_eᵀ`.
    pub residual_we: Residual,
    pub v_psd: PsdReport,
    pub iterations: usize,
}

fn residual_of(terms: &[Mat]) -> Residual {
    let total = terms
        .iter()
        .skip(1)
        .fold(terms[0].clone(), |acc, t| acc + t);
    Residual::new(fro(&total), terms.iter().map(fro).sum())
}

pub fn build_v(
    plant: &UncertainPlant,
    p: &Mat,
    z: &Mat,
    f: &Mat,
    l: &Mat,
    tol: &Tolerances,
) -> Result<VConstruction> {
    let _ = l;
    let n = plant.states();
    let eye = Mat::identity(n, n);
    let r = plant.r();
    let r_inv = positive_inverse(&r)?;
    let (a, b1, b2, c1, c2, d21) = (
        &plant.a, &plant.b1, &plant.b2, &plant.c1, &plant.c2, &plant.d21,
    );

    let w = solve_linear(&(&eye - p * z).transpose(), &z.transpose())?.transpose();
    let c_hat = solve_linear(d21, c2)?;
    let at_c1t = a.transpose() * c1.transpose();
    let a_w = a - b1 * &c_hat;
    let r_z =
        &at_c1t * &c_hat + c_hat.transpose() * at_c1t.transpose() - c_hat.transpose() * &r * &c_hat;
    let r_w = p * &a_w + a_w.transpose() * p + &r_z;
    let residual_w = residual_of(&[&a_w * &w, &w * a_w.transpose(), &w * &r_w * &w]);

    let phi = c1 * (a + b2 * f) - b1.transpose() * p;
    let a_e = a - b1 * &r_inv * &phi;
    let c_e1 = c1 * b2 * f;
    let c_e2 = c2 - d21 * &r_inv * &phi;
    let d21t_inv_r = solve_linear(&d21.transpose(), &r)?;
    let inner = b1 + &w * (c_e1.transpose() + c_e2.transpose() * d21t_inv_r);
    let l_e = -solve_linear(&d21.transpose(), &inner.transpose())?.transpose();
    let q_e = b1 + &l_e * d21 + &w * c_e1.transpose();
    let a_v = &a_e + &l_e * &c_e2;
    let residual_we = residual_of(&[
        &w * a_v.transpose(),
        &a_v * &w,
        &q_e * &r_inv * q_e.transpose(),
    ]);

    let b_v = b1 + &l_e * d21;
    let problem = AreProblem::v_form(a_v, b_v.clone(), &c_e1, r)?;
    let sol = solve_newton(&problem, NewtonOptions::default())?;
    let v = sol.x;
    let q_v = -&c_e1 - b_v.transpose() * &v;
    let psd_tol = solution_psd_tol(&problem, &v, &sol.residual, tol)?;
    let v_psd = psd_margin(&v, psd_tol)?;
    Ok(VConstruction {
        w,
        a_w,
        r_z,
        r_w,
        a_e,
        c_e1,
        c_e2,
        l_e,
        q_e,
        v,
        q_v,
        residual_v: sol.residual,
        residual_w,
        residual_we,
        v_psd,
        iterations: sol.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopVerification {
    pub residual: Residual,
    pub blocks: BlockResiduals,
    pub psd: PsdReport,
}

/// Evaluates the closed-loop equation at `Σ` in `(x, x − xk)` coordinates.
pub fn verify_closed_loop(
    cl: &ClosedLoop,
    sigma: &Mat,
    psd_tol: f64,
) -> Result<ClosedLoopVerification> {
    let problem = AreProblem::closed_loop(cl)?;
    let residual = problem.residual(sigma)?;
    let blocks = problem.block_residuals(sigma, cl.plant.states())?;
    let psd = psd_margin(&symmetrize(sigma), psd_tol)?;
    Ok(ClosedLoopVerification {
        residual,
        blocks,
        psd,
    })
}

#[derive(Debug, Clone)]
pub struct SynthesisReport {
    pub sf: StateFeedbackSolution,
    pub oi: OutputInjectionSolution,
    pub rho_zp: f64,
    pub controller: DynamicController,
    pub vc: VConstruction,
    pub sigma: Mat,
    pub closed_loop: ClosedLoop,
    pub verification: ClosedLoopVerification,
    pub closed_loop_residual: Residual,
    /// Spectral abscissa of the closed-loop state matrix.
    pub abscissa: f64,
    pub hurwitz: bool,
    pub freq: NiFreqCheck,
    /// Strict check, run only when the closed loop is Hurwitz.
    pub sni: Option<FreqCheck>,
    pub freq_verdict: bool,
}

pub fn synth_output_feedback(plant: &UncertainPlant) -> Result<SynthesisReport, SynthesisError> {
    synth_output_feedback_with(plant, &Tolerances::default())
}

pub fn synth_output_feedback_with(
    plant: &UncertainPlant,
    tol: &Tolerances,
) -> Result<SynthesisReport, SynthesisError> {
    let assumptions = check_assumptions(plant).map_err(tag(Stage::Assumptions))?;
    if !assumptions.all_hold() {
        return Err(SynthesisError::new(
            Stage::Assumptions,
            FailureKind::Assumption,
            format!("violated: {}", assumptions.failures().join(", ")),
        ));
    }
    let residual_failure = |stage: Stage, what: &str, r: &Residual| {
        SynthesisError::new(
            stage,
            FailureKind::Numerical,
            format!(
                "{what} residual {:.3e} exceeds {:.1e}",
                r.relative(),
                tol.residual
            ),
        )
    };

    let sf = synth_state_feedback(plant).map_err(tag(Stage::StateFeedback))?;
    if !sf.residual.within(tol.residual) {
        return Err(residual_failure(
            Stage::StateFeedback,
            "condition (a)",
            &sf.residual,
        ));
    }
    let oi = synth_output_injection(plant).map_err(tag(Stage::OutputInjection))?;
    if !oi.residual.within(tol.residual) {
        return Err(residual_failure(
            Stage::OutputInjection,
            "condition (b)",
            &oi.residual,
        ));
    }

    let (rho_zp, strict, _) = check_coupling(&sf.p, &oi.z).map_err(tag(Stage::Coupling))?;
    if !strict {
        return Err(SynthesisError::new(
            Stage::Coupling,
            FailureKind::NoSolution,
            format!("ρ(ZP) = {rho_zp:.6} is not below one"),
        ));
    }
    let controller =
        build_controller(plant, &sf.p, &oi.z, &sf.k, &oi.l).map_err(tag(Stage::Controller))?;

    let vc = build_v(plant, &sf.p, &oi.z, &sf.k, &oi.l, tol).map_err(tag(Stage::VConstruction))?;
    if !vc.residual_v.within(tol.residual) {
        return Err(residual_failure(
            Stage::VConstruction,
            "V equation",
            &vc.residual_v,
        ));
    }
    if !vc.v_psd.is_psd {
        return Err(SynthesisError::new(
            Stage::VConstruction,
            FailureKind::NoSolution,
            format!(
                "V is not PSD (smallest eigenvalue {:.6e})",
                vc.v_psd.min_eig
            ),
        ));
    }

    let closed_loop = build_closed_loop(plant, &controller).map_err(tag(Stage::ClosedLoop))?;
    let sigma = block_diag(&sf.p, &vc.v);
    let verification = verify_closed_loop(&closed_loop, &sigma, vc.v_psd.tol.max(tol.psd))
        .map_err(tag(Stage::ClosedLoop))?;
    let blocks = verification.blocks;
    for (what, r) in [
        ("closed-loop", &verification.residual),
        ("X11", &blocks.x11),
        ("X21", &blocks.x21),
        ("X22", &blocks.x22),
    ] {
        if !r.within(tol.residual) {
            return Err(residual_failure(Stage::ClosedLoop, what, r));
        }
    }
    if !verification.psd.is_psd {
        return Err(SynthesisError::new(
            Stage::ClosedLoop,
            FailureKind::NoSolution,
            format!(
                "Σ is not PSD (smallest eigenvalue {:.6e})",
                verification.psd.min_eig
            ),
        ));
    }

    let sys = closed_loop.transformed();
    let abscissa = spectral_abscissa(&sys.a).map_err(tag(Stage::Frequency))?;
    let hurwitz = abscissa < -tol.order;
    let grid = FreqGrid::default_for(&sys, tol.freq).map_err(tag(Stage::Frequency))?;
    let freq = ni_freq_check(&sys, &grid).map_err(tag(Stage::Frequency))?;
    let sni = if hurwitz {
        Some(sni_freq_check(&sys, &grid).map_err(tag(Stage::Frequency))?)
    } else {
        None
    };
    let freq_verdict = freq.verdict();
    Ok(SynthesisReport {
        closed_loop_residual: verification.residual,
        sf,
        oi,
        rho_zp,
        controller,
        vc,
        sigma,
        closed_loop,
        verification,
        abscissa,
        hurwitz,
        freq,
        sni,
        freq_verdict,
    })
}

/// Certificates recovered from a closed-loop solution in `(x, xk)`
/// coordinates.
#[derive(Debug, Clone)]
pub struct NecessityExtraction {
    pub sigma_full: Mat,
    pub e_tilde: Mat,
    pub e_bar: Mat,
    pub p: Mat,
    pub z: Mat,
    pub f: Mat,
    pub l: Mat,
    pub rho_zp: f64,
    pub residual_a: Residual,
    pub residual_b: Residual,
    /// `Z⁻¹ − P − Σ12Σ22⁻¹Σ12ᵀ`.
    pub identity: Residual,
    pub p_psd: PsdReport,
    pub z_psd: PsdReport,
}

impl NecessityExtraction {
    pub fn holds(&self) -> bool {
        self.p_psd.is_pd
            && self.z_psd.is_pd
            && self.rho_zp <= 1.0 + WEAK_COUPLING
            && self.residual_a.within(EXTRACTION_TOL)
            && self.residual_b.within(EXTRACTION_TOL)
    }
}

/// Solves the closed-loop equation in `(x, xk)` coordinates by Newton
/// iteration.
pub fn solve_closed_loop_sigma(cl: &ClosedLoop) -> Result<(Mat, Residual)> {
    let problem = AreProblem::closed_loop_original(cl)?;
    let sol = solve_newton(&problem, NewtonOptions::default())?;
    Ok((sol.x, sol.residual))
}

/// Gates the loop (SNI, minimal, `Σ` positive definite, `Σ` solves the
/// equation) and then extracts.
pub fn extract_necessity(
    cl: &ClosedLoop,
    k: &DynamicController,
    sigma_full: &Mat,
    tol: &Tolerances,
) -> Result<NecessityExtraction> {
    let sys = cl.original();
    let grid = FreqGrid::default_for(&sys, tol.freq)?;
    let sni = sni_freq_check(&sys, &grid)?;
    if !sni.verdict {
        return Err(Error::Domain(format!(
            "closed loop is not strictly negative imaginary (abscissa {:.3e}, worst margin {:.3e})",
            sni.abscissa, sni.worst_margin
        )));
    }
    let (controllable, observable) = minimality_check(&sys);
    if !(controllable && observable) {
        return Err(Error::Domain(format!(
            "closed loop is not minimal (controllable {controllable}, observable {observable})"
        )));
    }
    let psd = psd_margin(sigma_full, tol.psd)?;
    if !psd.is_pd {
        return Err(Error::Domain(format!(
            "Σ is not positive definite (smallest eigenvalue {:.6e})",
            psd.min_eig
        )));
    }
    let residual = AreProblem::closed_loop_original(cl)?.residual(sigma_full)?;
    if !residual.within(tol.residual) {
        return Err(Error::Domain(format!(
            "Σ does not solve the closed-loop equation (residual {:.3e})",
            residual.relative()
        )));
    }
    necessity_algebra(&cl.plant, k, sigma_full, tol)
}

/// The extraction formulas without gating.
pub fn necessity_algebra(
    plant: &UncertainPlant,
    k: &DynamicController,
    sigma_full: &Mat,
    tol: &Tolerances,
) -> Result<NecessityExtraction> {
    let n = plant.states();
    if sigma_full.shape() != (2 * n, 2 * n) {
        return Err(Error::Dimension(format!("Σ must be {0}x{0}", 2 * n)));
    }
    let s11 = sigma_full.view((0, 0), (n, n)).into_owned();
    let s12 = sigma_full.view((0, n), (n, n)).into_owned();
    let s22 = sigma_full.view((n, n), (n, n)).into_owned();
    let e_tilde = -solve_linear(&s22, &s12.transpose())?;
    let e_bar = solve_linear(&s11, &s12)?;
    let coupling = symmetrize(&(&s12 * solve_linear(&s22, &s12.transpose())?));
    let p = symmetrize(&(&s11 - &coupling));
    let z = symmetrize(&inverse(&s11)?);
    let f = &k.c_k * &e_tilde;
    let l = &e_bar * &k.b_k;
    let residual_a = AreProblem::condition_a(plant, &f)?.residual(&p)?;
    let residual_b = AreProblem::condition_b(plant, &l)?.residual(&z)?;
    let z_inv = inverse(&z)?;
    let identity = residual_of(&[z_inv, -&p, -coupling]);
    let (rho_zp, _, _) = check_coupling(&p, &z)?;
    Ok(NecessityExtraction {
        sigma_full: sigma_full.clone(),
        e_tilde,
        e_bar,
        p_psd: psd_margin(&p, tol.psd)?,
        z_psd: psd_margin(&z, tol.psd)?,
        p,
        z,
        f,
        l,
        rho_zp,
        residual_a,
        residual_b,
        identity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;
    use crate::matrix::{rank, spectral_abscissa};
    use proptest::prelude::*;

    fn m(r: usize, c: usize, d: &[f64]) -> Mat {
        Mat::from_row_slice(r, c, d)
    }

    /// `A_f = diag(0, 1)`, `b_f2 = 1`, `r = 2`, `b22 = 1`.
    fn split_plant(b1_2: f64) -> UncertainPlant {
        UncertainPlant::new(
            m(2, 2, &[-1.0, 0.0, -1.5, 1.0]),
            m(2, 1, &[1.0, b1_2]),
            m(2, 1, &[1.0, 1.5]),
            m(1, 2, &[1.0, 0.0]),
            m(1, 2, &[0.0, 1.0]),
            m(1, 1, &[1.0]),
        )
        .unwrap()
    }

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.shape() == b.shape() && (a - b).amax() <= tol
    }

    #[test]
    fn ex1_partition_is_all_stable() {
        let sp = schur_decompose_sf(&ex1_plant()).unwrap();
        assert_eq!(sp.stable_dim(), 3);
        assert_eq!(sp.a22.nrows(), 0);
        let plant = ex1_plant();
        let a_f0 = &plant.a - &plant.b2 * &plant.c1 * &plant.a;
        assert_eq!(
            a_f0,
            m(3, 3, &[0.0, 0.0, 0.0, 1.0, -1.0, 1.0, 2.0, 1.0, -1.0])
        );
        // char poly s(s + 2)s
        let ev = crate::matrix::eigvals(&a_f0).unwrap();
        let mut re: Vec<f64> = ev.iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        assert!((re[0] + 2.0).abs() < 1e-9 && re[1].abs() < 1e-7 && re[2].abs() < 1e-7);
        assert!(close(&(&sp.u * sp.a_f() * sp.u.transpose()), &a_f0, 1e-8));
    }

    #[test]
    fn split_fixture_partition() {
        let sp = schur_decompose_sf(&split_plant(1.0)).unwrap();
        assert_eq!(sp.stable_dim(), 1);
        assert!((sp.a22[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(sp.a11[(0, 0)].abs() < 1e-7);
        assert!((sp.bf2[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((sp.b22[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((sp.r[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_ts() {
        let e = Mat::zeros(0, 0);
        let sp = SchurPartition {
            u: Mat::identity(1, 1),
            a11: e.clone(),
            a12: Mat::zeros(0, 1),
            a22: m(1, 1, &[1.0]),
            bf1: Mat::zeros(0, 1),
            bf2: m(1, 1, &[1.0]),
            b11: Mat::zeros(0, 1),
            b22: m(1, 1, &[1.0]),
            r: m(1, 1, &[2.0]),
        };
        let (t, s, gap) = solve_ts(&sp).unwrap();
        assert!((t[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((s[(0, 0)] - 0.25).abs() < 1e-14);
        assert!((gap.min_eig - 0.75).abs() < 1e-14 && gap.is_pd);
    }

    #[test]
    fn split_fixture_state_feedback() {
        let plant = split_plant(1.0);
        let sf = synth_state_feedback(&plant).unwrap();
        assert!(close(&sf.p_f, &m(2, 2, &[0.0, 0.0, 0.0, 4.0 / 3.0]), 1e-12));
        assert!(close(&sf.p, &m(2, 2, &[0.0, 0.0, 0.0, 4.0 / 3.0]), 1e-12));
        assert!(close(
            &sf.p,
            &(&sf.partition.u * &sf.p_f * sf.partition.u.transpose()),
            1e-10
        ));
        assert!(sf.residual.within(1e-8), "{:?}", sf.residual);
        // the anti-stable mode is moved into the left half plane
        let a_t = &plant.a + &plant.b2 * &sf.k;
        assert!(spectral_abscissa(&a_t).unwrap() < 1e-7);
    }

    #[test]
    fn indefinite_ts_is_refused() {
        // bf2 = 0 gives T = 0 while S = 9/4
        let plant = split_plant(3.0);
        let (_, _, gap) = solve_ts(&schur_decompose_sf(&plant).unwrap()).unwrap();
        assert!(gap.min_eig < -1.0);
        assert!(matches!(
            synth_state_feedback(&plant),
            Err(Error::Certification(_))
        ));
        let err = synth_output_feedback(&plant).unwrap_err();
        assert_eq!(err.stage, Stage::StateFeedback);
        assert_eq!(err.kind, FailureKind::NoSolution);
    }

    #[test]
    fn boundary_ts_is_refused() {
        // b22 = 3/2 and bf2 = 3/4 give T = S = 9/16
        let plant = split_plant(1.5);
        let (_, _, gap) = solve_ts(&schur_decompose_sf(&plant).unwrap()).unwrap();
        assert!(gap.min_eig.abs() < 1e-12);
        let msg = synth_state_feedback(&plant).unwrap_err().to_string();
        assert!(msg.contains("boundary"), "{msg}");
    }

    #[test]
    fn singular_c1b2_is_an_assumption_failure() {
        let mut plant = ex1_plant();
        plant.b2 = m(3, 1, &[0.0, 1.0, 1.0]);
        assert!(schur_decompose_sf(&plant).is_err());
        let err = synth_output_feedback(&plant).unwrap_err();
        assert_eq!(err.stage, Stage::Assumptions);
        assert_eq!(err.kind, FailureKind::Assumption);
    }

    #[test]
    fn ex1_state_feedback() {
        let sf = synth_state_feedback(&ex1_plant()).unwrap();
        assert_eq!(sf.p, Mat::zeros(3, 3));
        assert!(close(&sf.k, &ex1_f(), 1e-12));
        assert_eq!(sf.residual.norm, 0.0);
    }

    #[test]
    fn ex1_output_injection() {
        let oi = synth_output_injection(&ex1_plant()).unwrap();
        assert_eq!(oi.route, InjectionRoute::DualSchur);
        assert_eq!(oi.z, Mat::zeros(3, 3));
        assert!(close(&oi.l, &ex1_l(), 1e-12));
        assert_eq!(oi.residual.norm, 0.0);
    }

    #[test]
    fn dual_matches_state_feedback_on_transposed_data() {
        // Condition (b) for L is condition (a) of the transposed plant,
        // so the dual route solves the state-feedback problem it maps to.
        let plant = ex1_plant();
        let oi = synth_output_injection(&plant).unwrap();
        let problem = AreProblem::condition_b(&plant, &oi.l).unwrap();
        let (a_hat, _, _) = problem.expanded();
        assert!(close(
            &a_hat,
            &(&plant.a + &oi.l * &plant.c2
                - (&plant.b1 + &oi.l * &plant.d21) * problem.r_inv() * &plant.c1 * &plant.a)
                .transpose(),
            1e-12
        ));
        assert_eq!(oi.z, Mat::zeros(3, 3));
    }

    #[test]
    fn coupling_cases() {
        let i = Mat::identity(2, 2);
        assert_eq!(
            check_coupling(&Mat::zeros(2, 2), &i).unwrap(),
            (0.0, true, true)
        );
        let (rho, strict, weak) = check_coupling(&i, &i).unwrap();
        assert!((rho - 1.0).abs() < 1e-15 && !strict && weak);
        let (rho, strict, weak) = check_coupling(&i, &(&i * 2.0)).unwrap();
        assert!((rho - 2.0).abs() < 1e-15 && !strict && !weak);
    }

    #[test]
    fn ex1_controller_is_the_published_one() {
        let plant = ex1_plant();
        let z = Mat::zeros(3, 3);
        let k = build_controller(&plant, &z, &z, &ex1_f(), &ex1_l()).unwrap();
        let published = ex1_controller();
        assert!(close(&k.a_k, &published.a_k, 1e-10));
        assert!(close(&k.b_k, &published.b_k, 1e-10));
        assert!(close(&k.c_k, &published.c_k, 1e-10));
    }

    #[test]
    fn singular_coupling_is_rejected() {
        let plant = ex1_plant();
        let i = Mat::identity(3, 3);
        let err = build_controller(&plant, &i, &i, &ex1_f(), &ex1_l()).unwrap_err();
        assert!(matches!(err, Error::Certification(_)), "{err}");
    }

    #[test]
    fn ex1_v_matches_print() {
        let plant = ex1_plant();
        let z = Mat::zeros(3, 3);
        let vc = build_v(&plant, &z, &z, &ex1_f(), &ex1_l(), &Tolerances::default()).unwrap();
        assert_eq!(vc.w, z);
        assert!(close(&vc.v, &ex1_printed_v(), 1e-3), "{}", vc.v);
        assert!(vc.residual_v.within(1e-8));
        assert!(vc.v_psd.is_psd);
        assert!(close(&vc.l_e, &-ex1_controller().b_k, 1e-12));
    }

    #[test]
    fn ex1_end_to_end() {
        let report = synth_output_feedback(&ex1_plant()).unwrap();
        let published = ex1_controller();
        assert!(close(&report.controller.a_k, &published.a_k, 1e-10));
        assert!(close(&report.controller.b_k, &published.b_k, 1e-10));
        assert!(close(&report.controller.c_k, &published.c_k, 1e-10));
        assert_eq!(report.rho_zp, 0.0);
        assert!(report.freq_verdict);
        assert!(!report.hurwitz);
        assert!(report.sni.is_none());
        assert!(close(&report.sigma, &ex1_printed_sigma(), 1e-3));
        let b = report.verification.blocks;
        for r in [b.x11, b.x21, b.x22] {
            assert!(r.within(1e-8), "{r:?}");
        }
    }

    #[test]
    fn printed_sigma_on_ex1_loop() {
        let cl = build_closed_loop(&ex1_plant(), &ex1_controller()).unwrap();
        let v = verify_closed_loop(&cl, &ex1_printed_sigma(), 1e-3).unwrap();
        assert!(v.residual.within(5e-3), "{:?}", v.residual);
        assert!(v.psd.is_psd);
    }

    #[test]
    fn zero_sigma_leaves_the_quadratic_term() {
        let cl = build_closed_loop(&ex1_plant(), &ex1_controller()).unwrap();
        let v = verify_closed_loop(&cl, &Mat::zeros(6, 6), 1e-9).unwrap();
        let ca = &cl.c_cl * &cl.a_cl;
        let r_inv = inverse(&cl.plant.r()).unwrap();
        let expected = fro(&(ca.transpose() * r_inv * &ca));
        assert_eq!(v.residual.norm, expected);
    }

    #[test]
    fn ex1_necessity_is_refused() {
        let cl = build_closed_loop(&ex1_plant(), &ex1_controller()).unwrap();
        let psd = psd_margin(&ex1_printed_sigma(), 1e-9).unwrap();
        assert_eq!(psd.min_eig, 0.0);
        let err = extract_necessity(
            &cl,
            &ex1_controller(),
            &ex1_printed_sigma(),
            &Tolerances::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
    }

    #[test]
    fn block_diagonal_sigma_extracts_trivially() {
        let plant = ex1_plant();
        let s11 = m(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 3.0]);
        let sigma = block_diag(&s11, &Mat::identity(3, 3));
        let ex =
            necessity_algebra(&plant, &ex1_controller(), &sigma, &Tolerances::default()).unwrap();
        assert!(close(&ex.p, &s11, 1e-14));
        assert!(close(&ex.z, &inverse(&s11).unwrap(), 1e-14));
        assert_eq!(ex.f, Mat::zeros(1, 3));
        assert_eq!(ex.l, Mat::zeros(3, 1));
        assert!(ex.identity.norm < 1e-14);
    }

    fn random_plant(n: usize, data: &[f64]) -> Option<UncertainPlant> {
        let mut it = data.iter().copied();
        let mut take = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| it.next().unwrap());
        let plant = UncertainPlant::new(
            take(n, n),
            take(n, 1),
            take(n, 1),
            take(1, n),
            take(1, n),
            take(1, 1),
        )
        .ok()?;
        (plant.r()[(0, 0)] > 0.05 && plant.d21[(0, 0)].abs() > 0.05).then_some(plant)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn successful_synthesis_meets_its_obligations(
            n in 2usize..5,
            data in proptest::collection::vec(-2.0f64..2.0, 40),
        ) {
            let Some(plant) = random_plant(n, &data) else { return Ok(()) };
            let Ok(report) = synth_output_feedback(&plant) else { return Ok(()) };
            let b = report.verification.blocks;
            for r in [b.x11, b.x21, b.x22, report.closed_loop_residual, report.sf.residual, report.oi.residual, report.vc.residual_v] {
                prop_assert!(r.within(1e-8), "{r:?}");
            }
            prop_assert!(report.rho_zp < 1.0);
            prop_assert!(report.verification.psd.is_psd);
            prop_assert!(rank(&report.sf.p, 1e-9) <= report.sf.partition.a22.nrows());
            prop_assert!(report.vc.residual_w.within(1e-8), "{:?}", report.vc.residual_w);
            prop_assert!(report.vc.residual_we.within(1e-8), "{:?}", report.vc.residual_we);
            prop_assert!(close(&report.vc.l_e, &-&report.controller.b_k, 1e-8 * (1.0 + report.controller.b_k.amax())));
            let w_psd = psd_margin(&symmetrize(&report.vc.w), 1e-9 * (1.0 + report.vc.w.amax())).unwrap();
            prop_assert!(w_psd.is_psd);
        }

        #[test]
        fn partition_invariants(
            n in 2usize..6,
            data in proptest::collection::vec(-2.0f64..2.0, 60),
        ) {
            let Some(plant) = random_plant(n, &data) else { return Ok(()) };
            let Ok(sp) = schur_decompose_sf(&plant) else { return Ok(()) };
            let m = c1b2_inverse(&plant).unwrap();
            let a_f0 = &plant.a - &plant.b2 * &m * &plant.c1 * &plant.a;
            let back = &sp.u * sp.a_f() * sp.u.transpose();
            prop_assert!((&back - &a_f0).amax() <= 1e-8 * (1.0 + a_f0.amax()));
            let tol = Tolerances::default().order;
            for z in crate::matrix::eigvals(&sp.a11).unwrap() {
                prop_assert!(z.re <= tol);
            }
            for z in crate::matrix::eigvals(&sp.a22).unwrap() {
                prop_assert!(z.re > tol);
            }
            let near_zero = crate::matrix::eigvals(&sp.a11).unwrap().iter().any(|z| z.norm() <= 1e-7 * (1.0 + a_f0.amax()));
            prop_assert!(near_zero);
        }
    }
}

//! Negative-imaginary, strictly negative-imaginary and positive-real
//! checks, both on a frequency grid and through Riccati certificates.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matrix::{
    eigvals_clustered, fro, hermitian_min_eig, inverse, psd_margin, spectral_radius, CMat, Mat,
    PsdReport,
};
use crate::riccati::{solve_newton, AreKind, AreProblem, NewtonOptions};
use crate::ss::{minimality_check, FrequencyEvaluator, SniUncertainty, StateSpace};
use crate::tol::{Residual, Tolerances};

/// Grid points closer than this to an eigenvalue of `A` are skipped.
pub const GRID_POLE_GAP: f64 = 1e-6;
/// Real-axis offset used to probe poles on the imaginary axis.
pub const PROBE_STEP: f64 = 1e-4;
/// Relative tolerance on residues and double-pole limits. Residues from
/// eigenvectors are accurate to roundoff, limits from extrapolation to
/// about `PROBE_STEP²`.
pub const RESIDUE_TOL: f64 = 1e-6;
/// Eigenvalues of the SNI side-condition matrix this close to zero count
/// as lying at the origin. Newton converges linearly onto such solutions,
/// which leaves the eigenvalue displaced by roughly the square root of the
/// residual.
pub const ORIGIN_RADIUS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FreqGrid {
    pub omegas: Vec<f64>,
    pub tol: f64,
}

impl FreqGrid {
    pub fn new(omegas: Vec<f64>, tol: f64) -> Result<Self> {
        if omegas.is_empty() {
            return Err(Error::Domain("frequency grid is empty".into()));
        }
        if omegas.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain(
                "frequencies must be finite and non-negative".into(),
            ));
        }
        if omegas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(
                "frequencies must be strictly increasing".into(),
            ));
        }
        Ok(Self { omegas, tol })
    }

    /// `points` logarithmically spaced frequencies in `[min, max]`.
    pub fn log_spaced(min: f64, max: f64, points: usize, tol: f64) -> Result<Self> {
        if min.is_nan() || max.is_nan() || min <= 0.0 || max < min || points == 0 {
            return Err(Error::Domain(format!(
                "need 0 < omega-min <= omega-max and at least one point, got [{min}, {max}] with {points}"
            )));
        }
        if points == 1 || min == max {
            if points != 1 {
                return Err(Error::Domain(
                    "a degenerate range holds exactly one point".into(),
                ));
            }
            return Self::new(vec![min], tol);
        }
        let (lo, hi) = (min.log10(), max.log10());
        let step = (hi - lo) / (points - 1) as f64;
        let mut omegas: Vec<f64> = (0..points)
            .map(|k| 10f64.powf(lo + step * k as f64))
            .collect();
        omegas[0] = min;
        omegas[points - 1] = max;
        Self::new(omegas, tol)
    }

    /// 200 points over `[1e−3, 1e3]`, plus `ω = 0` when the origin is not an
    /// eigenvalue of `A`.
    pub fn default_for(sys: &StateSpace, tol: f64) -> Result<Self> {
        let mut grid = Self::log_spaced(1e-3, 1e3, 200, tol)?;
        let ev = FrequencyEvaluator::new(sys)?;
        if ev.pole_distance(Complex64::new(0.0, 0.0)) > GRID_POLE_GAP {
            grid.omegas.insert(0, 0.0);
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisPole {
    pub omega0: f64,
    pub simple: bool,
    pub residue_psd: bool,
    pub residue: Option<CMat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OriginPole {
    pub order: u32,
    pub limit_psd: bool,
    pub limit: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoleConditionReport {
    pub axis_poles: Vec<AxisPole>,
    pub origin_pole: Option<OriginPole>,
}

impl PoleConditionReport {
    pub fn passes(&self) -> bool {
        self.axis_poles.iter().all(|p| p.simple && p.residue_psd)
            && self
                .origin_pole
                .as_ref()
                .is_none_or(|o| o.order <= 1 || (o.order == 2 && o.limit_psd))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqCheck {
    pub verdict: bool,
    /// Smallest margin over the evaluated grid points (`+inf` if none).
    pub worst_margin: f64,
    /// `(ω, margin)` for every evaluated point, in grid order.
    pub margins: Vec<(f64, f64)>,
    /// Grid points skipped for pole proximity.
    pub skipped: Vec<f64>,
    /// Largest real part over the spectrum of `A`.
    pub abscissa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiFreqCheck {
    pub check: FreqCheck,
    pub stable: bool,
    pub poles: PoleConditionReport,
}

impl NiFreqCheck {
    pub fn verdict(&self) -> bool {
        self.check.verdict
    }

    pub fn worst_margin(&self) -> f64 {
        self.check.worst_margin
    }
}

/// `λmin(j(G − G*))`.
pub fn ni_margin(g: &CMat) -> f64 {
    let j = Complex64::new(0.0, 1.0);
    hermitian_min_eig(&((g - g.adjoint()) * j))
}

/// `λmin(F + F*)`.
pub fn pr_margin(f: &CMat) -> f64 {
    hermitian_min_eig(&(f + f.adjoint()))
}

fn ensure_square_system(sys: &StateSpace) -> Result<()> {
    if sys.is_square() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "transfer matrix must be square, got {}x{}",
            sys.outputs(),
            sys.inputs()
        )))
    }
}

/// Margins at the evaluated points and the skipped frequencies.
type Sweep = (Vec<(f64, f64)>, Vec<f64>);

fn sweep(
    ev: &FrequencyEvaluator<'_>,
    grid: &FreqGrid,
    margin: impl Fn(f64, &CMat) -> f64,
) -> Result<Sweep> {
    let mut margins = Vec::with_capacity(grid.omegas.len());
    let mut skipped = Vec::new();
    for &w in &grid.omegas {
        let s = Complex64::new(0.0, w);
        if ev.pole_distance(s) <= GRID_POLE_GAP {
            skipped.push(w);
            continue;
        }
        match ev.at(s) {
            Ok(g) => margins.push((w, margin(w, &g))),
            Err(Error::PoleProximity { .. }) => skipped.push(w),
            Err(e) => return Err(e),
        }
    }
    Ok((margins, skipped))
}

fn worst(margins: &[(f64, f64)]) -> f64 {
    margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min)
}

fn axis_scale(a: &Mat) -> f64 {
    1e-9 * fro(a).max(1.0)
}

/// Examines every imaginary-axis eigenvalue of `A` that is a pole of `G`.
pub fn pole_conditions(sys: &StateSpace) -> Result<PoleConditionReport> {
    let ev = FrequencyEvaluator::new(sys)?;
    let clustered = eigvals_clustered(&sys.a)?;
    let tol = axis_scale(&sys.a);
    let mut seen: Vec<Complex64> = Vec::new();
    let mut report = PoleConditionReport::default();
    for z in clustered {
        if z.re.abs() > tol || z.im < -tol {
            continue;
        }
        if seen
            .iter()
            .any(|w| (w - z).norm() <= 1e-9 * (1.0 + z.norm()))
        {
            continue;
        }
        seen.push(z);
        let omega0 = if z.im.abs() <= tol { 0.0 } else { z.im };
        let s0 = Complex64::new(0.0, omega0);
        let h = PROBE_STEP * omega0.max(1.0);
        let order = probe_order(&ev, s0, h)?;
        if order == 0 {
            continue;
        }
        if omega0 == 0.0 {
            let (limit, limit_psd) = if order == 2 {
                let l = double_pole_limit(&ev, h)?;
                let ok = limit_is_psd(&l);
                (Some(l), ok)
            } else {
                (None, order < 2)
            };
            report.origin_pole = Some(OriginPole {
                order,
                limit_psd,
                limit,
            });
        } else if order == 1 {
            let multiplicity = sys_multiplicity(&sys.a, z)?;
            let k = if multiplicity == 1 {
                residue_from_eigenvectors(sys, z).unwrap_or(residue_by_extrapolation(&ev, s0, h)?)
            } else {
                residue_by_extrapolation(&ev, s0, h)?
            };
            let residue_psd = residue_is_psd(&k);
            report.axis_poles.push(AxisPole {
                omega0,
                simple: true,
                residue_psd,
                residue: Some(k),
            });
        } else {
            report.axis_poles.push(AxisPole {
                omega0,
                simple: false,
                residue_psd: false,
                residue: None,
            });
        }
    }
    Ok(report)
}

fn sys_multiplicity(a: &Mat, z: Complex64) -> Result<usize> {
    let scale = fro(a).max(1.0);
    let raw = crate::matrix::eigvals(a)?;
    Ok(raw
        .iter()
        .filter(|w| (*w - z).norm() <= 1e-6 * scale)
        .count())
}

/// Pole order at `s0` from the growth of `‖G‖` as the probe halves.
fn probe_order(ev: &FrequencyEvaluator<'_>, s0: Complex64, h: f64) -> Result<u32> {
    let g1 = ev.at(s0 + h)?.norm();
    let g2 = ev.at(s0 + h / 2.0)?.norm();
    if g1 == 0.0 {
        return Ok(0);
    }
    let order = (g2 / g1).log2().round();
    Ok(if order.is_finite() && order > 0.0 {
        order as u32
    } else {
        0
    })
}

/// `lim_{s→0} s² G(s)` by Richardson extrapolation of `h² G(h)`.
fn double_pole_limit(ev: &FrequencyEvaluator<'_>, h: f64) -> Result<Mat> {
    let f = |x: f64| -> Result<Mat> { Ok(ev.at(Complex64::new(x, 0.0))?.map(|z| z.re) * (x * x)) };
    Ok(f(h / 2.0)? * 2.0 - f(h)?)
}

fn limit_is_psd(l: &Mat) -> bool {
    let scale = fro(l).max(1.0);
    if fro(&(l - l.transpose())) > RESIDUE_TOL * scale {
        return false;
    }
    psd_margin(&crate::matrix::symmetrize(l), RESIDUE_TOL * scale)
        .map(|r| r.is_psd)
        .unwrap_or(false)
}

/// `K = lim (s − jω0) j G(s)` by Richardson extrapolation along the real offset.
fn residue_by_extrapolation(ev: &FrequencyEvaluator<'_>, s0: Complex64, h: f64) -> Result<CMat> {
    let j = Complex64::new(0.0, 1.0);
    let f = |x: f64| -> Result<CMat> { Ok(ev.at(s0 + x)? * (j * x)) };
    Ok(f(h / 2.0)? * Complex64::new(2.0, 0.0) - f(h)?)
}

/// `K = j C v w* B` with right/left eigenvectors normalized so `w* v = 1`.
fn residue_from_eigenvectors(sys: &StateSpace, lambda: Complex64) -> Option<CMat> {
    let n = sys.states();
    let a = crate::matrix::to_complex(&sys.a);
    let shifted = &a - CMat::identity(n, n) * lambda;
    let null_vec = |m: CMat| -> Option<nalgebra::DVector<Complex64>> {
        let svd = nalgebra::linalg::SVD::new(m, false, true);
        let v_t = svd.v_t?;
        let (idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))?;
        Some(v_t.row(idx).adjoint())
    };
    let v = null_vec(shifted.clone())?;
    let w = null_vec(shifted.adjoint())?;
    let wv = (w.adjoint() * &v)[(0, 0)];
    if wv.norm() <= 1e-8 {
        return None;
    }
    let c = crate::matrix::to_complex(&sys.c);
    let b = crate::matrix::to_complex(&sys.b);
    let j = Complex64::new(0.0, 1.0);
    Some((&c * &v) * (w.adjoint() * &b) * (j / wv))
}

fn residue_is_psd(k: &CMat) -> bool {
    let scale = k.norm().max(1.0);
    if (k - k.adjoint()).norm() > RESIDUE_TOL * scale {
        return false;
    }
    hermitian_min_eig(k) >= -RESIDUE_TOL * scale
}

pub fn ni_freq_check(sys: &StateSpace, grid: &FreqGrid) -> Result<NiFreqCheck> {
    ensure_square_system(sys)?;
    let ev = FrequencyEvaluator::new(sys)?;
    let abscissa = crate::matrix::spectral_abscissa(&sys.a)?;
    let stable = abscissa <= Tolerances::default().order;
    let (margins, skipped) = sweep(&ev, grid, |_, g| ni_margin(g))?;
    let worst_margin = worst(&margins);
    let poles = pole_conditions(sys)?;
    let verdict = stable && worst_margin >= -grid.tol && poles.passes();
    Ok(NiFreqCheck {
        check: FreqCheck {
            verdict,
            worst_margin,
            margins,
            skipped,
            abscissa,
        },
        stable,
        poles,
    })
}

pub fn sni_freq_check(sys: &StateSpace, grid: &FreqGrid) -> Result<FreqCheck> {
    ensure_square_system(sys)?;
    let ev = FrequencyEvaluator::new(sys)?;
    let abscissa = crate::matrix::spectral_abscissa(&sys.a)?;
    let (margins, skipped) = sweep(&ev, grid, |_, g| ni_margin(g))?;
    let positive: Vec<(f64, f64)> = margins.iter().copied().filter(|m| m.0 > 0.0).collect();
    let worst_margin = worst(&positive);
    let verdict = abscissa < -Tolerances::default().order && worst_margin > grid.tol;
    Ok(FreqCheck {
        verdict,
        worst_margin,
        margins,
        skipped,
        abscissa,
    })
}

/// Realization `(A, B, CA, CB)` of `F(s) = s(G(s) − D)`.
pub fn shifted_system(sys: &StateSpace) -> StateSpace {
    StateSpace {
        a: sys.a.clone(),
        b: sys.b.clone(),
        c: &sys.c * &sys.a,
        d: &sys.c * &sys.b,
    }
}

/// Positive-real check of `s(G(s) − D)` on the grid.
pub fn pr_check_of_shifted(sys: &StateSpace, grid: &FreqGrid) -> Result<FreqCheck> {
    ensure_square_system(sys)?;
    let f = shifted_system(sys);
    let ev = FrequencyEvaluator::new(&f)?;
    let abscissa = crate::matrix::spectral_abscissa(&sys.a)?;
    let (margins, skipped) = sweep(&ev, grid, |_, g| pr_margin(g))?;
    let worst_margin = worst(&margins);
    Ok(FreqCheck {
        verdict: worst_margin >= -grid.tol,
        worst_margin,
        margins,
        skipped,
        abscissa,
    })
}

pub fn are_residual(problem: &AreProblem, candidate: &Mat) -> Result<Residual> {
    problem.residual(candidate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideCondition {
    pub name: &'static str,
    pub holds: bool,
    /// Informational conditions are reported but do not affect validity.
    pub required: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct NiCertificate {
    pub kind: AreKind,
    pub solution: Mat,
    pub residual: Residual,
    pub residual_norm: f64,
    pub psd: PsdReport,
    pub side_conditions: Vec<SideCondition>,
    pub tolerances: Tolerances,
    pub iterations: usize,
}

impl NiCertificate {
    pub fn residual_ok(&self) -> bool {
        self.residual.within(self.tolerances.residual)
    }

    fn definiteness_ok(&self) -> bool {
        match self.kind {
            AreKind::SniPrimal | AreKind::SniDual => self.psd.is_pd,
            _ => self.psd.is_psd,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.residual_ok()
            && self.definiteness_ok()
            && self.side_conditions.iter().all(|c| c.holds || !c.required)
    }

    /// First reason the certificate is not valid.
    pub fn failure(&self) -> Option<String> {
        if !self.residual_ok() {
            return Some(format!(
                "relative residual {:.3e} exceeds {:.1e}",
                self.residual.relative(),
                self.tolerances.residual
            ));
        }
        if !self.definiteness_ok() {
            return Some(format!(
                "solution smallest eigenvalue {:.3e} fails the definiteness test",
                self.psd.min_eig
            ));
        }
        self.side_conditions
            .iter()
            .find(|c| c.required && !c.holds)
            .map(|c| format!("{}: {}", c.name, c.detail))
    }
}

fn stability_condition(sys: &StateSpace, strict: bool, tol: &Tolerances) -> Result<SideCondition> {
    let abscissa = crate::matrix::spectral_abscissa(&sys.a)?;
    let holds = if strict {
        abscissa < -tol.order
    } else {
        abscissa <= tol.order
    };
    Ok(SideCondition {
        name: if strict {
            "A Hurwitz"
        } else {
            "A has no eigenvalue in Re > 0"
        },
        holds,
        required: true,
        detail: format!("spectral abscissa {abscissa:.6e}"),
    })
}

fn minimality_condition(sys: &StateSpace) -> SideCondition {
    let (c, o) = minimality_check(sys);
    SideCondition {
        name: "minimal realization",
        holds: c && o,
        required: false,
        detail: format!("controllable {c}, observable {o}"),
    }
}

fn origin_or_stable(m: &Mat, tol: &Tolerances) -> Result<SideCondition> {
    let eigs = eigvals_clustered(m)?;
    let bad: Vec<Complex64> = eigs
        .iter()
        .copied()
        .filter(|z| !(z.re < -tol.order || z.norm() < ORIGIN_RADIUS))
        .collect();
    Ok(SideCondition {
        name: "closed-loop spectrum in open left half-plane or at origin",
        holds: bad.is_empty(),
        required: true,
        detail: if bad.is_empty() {
            "all eigenvalues placed".into()
        } else {
            format!("offending eigenvalues {bad:?}")
        },
    })
}

/// PSD tolerance for a computed Riccati solution. When `Â + GX` is singular
/// the equation has a singular derivative at `X`, and the solution is only
/// determined to about the square root of the residual level; the
/// tolerance widens accordingly. Candidates whose residual exceeds
/// `tol.residual` are not solutions and get `tol.psd`.
pub fn solution_psd_tol(
    problem: &AreProblem,
    x: &Mat,
    residual: &Residual,
    tol: &Tolerances,
) -> Result<f64> {
    if !residual.within(tol.residual) {
        return Ok(tol.psd);
    }
    let (a_hat, g, _) = problem.expanded();
    let closed = &a_hat + &g * x;
    let critical = eigvals_clustered(&closed)?
        .iter()
        .any(|z| z.norm() < ORIGIN_RADIUS * fro(&closed).max(1.0));
    if !critical {
        return Ok(tol.psd);
    }
    let level = residual.relative().max(f64::EPSILON);
    Ok(tol.psd.max(10.0 * level.sqrt() * fro(x).max(1.0)))
}

fn certificate_for(kind: AreKind, sys: &StateSpace, tol: &Tolerances) -> Result<NiCertificate> {
    let problem = AreProblem::for_system(kind, sys)
        .map_err(|e| Error::Certification(format!("undecided by ARE route: {e}")))?;
    let sol = solve_newton(&problem, NewtonOptions::default())
        .map_err(|e| Error::Certification(format!("undecided by ARE route: {e}")))?;
    let psd = psd_margin(
        &sol.x,
        solution_psd_tol(&problem, &sol.x, &sol.residual, tol)?,
    )?;
    let strict = matches!(kind, AreKind::SniPrimal | AreKind::SniDual);
    let mut side_conditions = vec![stability_condition(sys, strict, tol)?];
    if strict {
        side_conditions.push(origin_or_stable(
            &problem.side_condition_matrix(&sol.x),
            tol,
        )?);
    }
    side_conditions.push(minimality_condition(sys));
    Ok(NiCertificate {
        kind,
        residual_norm: sol.residual.norm,
        residual: sol.residual,
        solution: sol.x,
        psd,
        side_conditions,
        tolerances: *tol,
        iterations: sol.iterations,
    })
}

/// Tries the primal equation, then the dual one. Returns the first valid
/// certificate or the primal attempt when neither is valid.
fn certify(kinds: [AreKind; 2], sys: &StateSpace, tol: &Tolerances) -> Result<NiCertificate> {
    let mut first: Option<Result<NiCertificate>> = None;
    for kind in kinds {
        let attempt = certificate_for(kind, sys, tol);
        if let Ok(c) = &attempt {
            if c.is_valid() {
                return attempt;
            }
        }
        first.get_or_insert(attempt);
    }
    first.expect("at least one attempt")
}

/// Attempts an NI certificate. The returned certificate may be invalid;
/// use [`certify_ni_via_are`] for a pass/fail outcome.
pub fn attempt_ni_certificate(sys: &StateSpace, tol: &Tolerances) -> Result<NiCertificate> {
    ensure_square_system(sys)?;
    certify([AreKind::NiPrimal, AreKind::NiDual], sys, tol)
}

pub fn certify_ni_via_are(sys: &StateSpace, tol: &Tolerances) -> Result<NiCertificate> {
    let cert = attempt_ni_certificate(sys, tol)?;
    match cert.failure() {
        None => Ok(cert),
        Some(why) => Err(Error::Certification(format!(
            "undecided by ARE route: {why}"
        ))),
    }
}

pub fn attempt_sni_certificate(sys: &StateSpace, tol: &Tolerances) -> Result<NiCertificate> {
    ensure_square_system(sys)?;
    let axis = eigvals_clustered(&sys.a)?
        .into_iter()
        .find(|z| z.re.abs() <= axis_scale(&sys.a));
    if let Some(z) = axis {
        return Err(Error::Domain(format!(
            "A has an imaginary-axis eigenvalue at {:.3e}{:+.3e}i",
            z.re, z.im
        )));
    }
    certify([AreKind::SniPrimal, AreKind::SniDual], sys, tol)
}

pub fn certify_sni_via_are(sys: &StateSpace, tol: &Tolerances) -> Result<NiCertificate> {
    let cert = attempt_sni_certificate(sys, tol)?;
    match cert.failure() {
        None => Ok(cert),
        Some(why) => Err(Error::Certification(format!(
            "undecided by ARE route: {why}"
        ))),
    }
}

/// Maps a positive definite solution `P` of the SNI equation to `Z = P⁻¹`
/// and evaluates `Z A₀ᵀ + A₀ Z + Z Q̄ Z + B R⁻¹ Bᵀ` with
/// `A₀ = A − BR⁻¹CA`, `Q̄ = AᵀCᵀR⁻¹CA`.
pub fn lemma7_transform(p: &Mat, sys: &StateSpace) -> Result<(Mat, Residual)> {
    let problem = AreProblem::for_system(AreKind::SniPrimal, sys)?;
    let source = problem.residual(p)?;
    if !source.within(1e-8) {
        return Err(Error::Domain(format!(
            "P does not solve the SNI equation (residual {:.3e})",
            source.norm
        )));
    }
    let z = inverse(p).map_err(|_| Error::Domain("P is singular".into()))?;
    let (a0, g, h) = problem.expanded();
    let t1 = &z * a0.transpose();
    let t2 = &a0 * &z;
    let t3 = &z * &h * &z;
    let total = &t1 + &t2 + &t3 + &g;
    let residual = Residual {
        norm: fro(&total),
        scale: fro(&t1) + fro(&t2) + fro(&t3) + fro(&g),
    };
    Ok((z, residual))
}

/// DC-gain robust stability test: `ρ(G(0) Δ(0)) < 1`.
pub fn dc_gain_robust_check(g: &StateSpace, delta: &SniUncertainty) -> Result<(bool, f64)> {
    let d = delta.system();
    if g.outputs() != d.inputs() || g.inputs() != d.outputs() {
        return Err(Error::Dimension(format!(
            "G is {}x{} but Δ is {}x{}",
            g.outputs(),
            g.inputs(),
            d.outputs(),
            d.inputs()
        )));
    }
    let g0 = crate::ss::freq_response(g, 0.0)?.map(|z| z.re);
    let d0 = crate::ss::freq_response(&d, 0.0)?.map(|z| z.re);
    let rho = spectral_radius(&(g0 * d0))?;
    Ok((rho < 1.0, rho))
}

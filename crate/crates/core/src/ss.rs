//! State-space realizations, the uncertain plant, structural assumption
//! checks, output injection, closed-loop assembly and frequency response.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matrix::{
    complex_rank, condition_number, eigvals, eigvals_clustered, ensure_finite, fro, psd_margin,
    rank, solve_linear, to_complex, CMat, Mat, MAX_CONDITION,
};

/// Eigenvalues with real part at or above this are checked by PBH.
pub const PBH_REAL_PART: f64 = -1e-9;
/// Relative singular-value threshold for the PBH rank tests.
pub const PBH_RANK_TOL: f64 = 1e-8;
/// Relative singular-value threshold for the Kalman rank tests.
pub const KALMAN_RANK_TOL: f64 = 1e-9;
/// Minimum distance between `jω` and an eigenvalue of `A` for evaluation.
pub const POLE_DISTANCE: f64 = 1e-9;

fn dims(m: &Mat) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn expect_shape(m: &Mat, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() == rows && m.ncols() == cols {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what} must be {rows}x{cols}, got {}",
            dims(m)
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
}

impl StateSpace {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        let n = a.nrows();
        expect_shape(&a, n, n, "A")?;
        let m = b.ncols();
        expect_shape(&b, n, m, "B")?;
        let p = c.nrows();
        expect_shape(&c, p, n, "C")?;
        expect_shape(&d, p, m, "D")?;
        for (mat, name) in [(&a, "A"), (&b, "B"), (&c, "C"), (&d, "D")] {
            ensure_finite(mat, name)?;
        }
        Ok(Self { a, b, c, d })
    }

    /// System with zero feedthrough.
    pub fn strictly_proper(a: Mat, b: Mat, c: Mat) -> Result<Self> {
        let d = Mat::zeros(c.nrows(), b.ncols());
        Self::new(a, b, c, d)
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_square(&self) -> bool {
        self.inputs() == self.outputs()
    }

    /// `R = CB + BᵀCᵀ` for square systems.
    pub fn r(&self) -> Result<Mat> {
        if !self.is_square() {
            return Err(Error::Dimension(format!(
                "system must be square, has {} outputs and {} inputs",
                self.outputs(),
                self.inputs()
            )));
        }
        let cb = &self.c * &self.b;
        Ok(&cb + cb.transpose())
    }
}

pub fn transpose_system(sys: &StateSpace) -> StateSpace {
    StateSpace {
        a: sys.a.transpose(),
        b: sys.c.transpose(),
        c: sys.b.transpose(),
        d: sys.d.transpose(),
    }
}

pub fn output_injection(sys: &StateSpace, l: &Mat) -> Result<StateSpace> {
    expect_shape(l, sys.states(), sys.outputs(), "L")?;
    Ok(StateSpace {
        a: &sys.a + l * &sys.c,
        b: &sys.b + l * &sys.d,
        c: sys.c.clone(),
        d: sys.d.clone(),
    })
}

/// Plant with disturbance channel `w → z` and control channel `u → y`:
/// `ẋ = Ax + B1 w + B2 u`, `z = C1 x`, `y = C2 x + D21 w`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainPlant {
    pub a: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub c1: Mat,
    pub c2: Mat,
    pub d21: Mat,
}

impl UncertainPlant {
    pub fn new(a: Mat, b1: Mat, b2: Mat, c1: Mat, c2: Mat, d21: Mat) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::Dimension(
                "plant must have at least one state".into(),
            ));
        }
        expect_shape(&a, n, n, "A")?;
        let m = b1.ncols();
        let r = b2.ncols();
        if m == 0 || r == 0 {
            return Err(Error::Dimension(
                "B1 and B2 need at least one column".into(),
            ));
        }
        expect_shape(&b1, n, m, "B1")?;
        expect_shape(&b2, n, r, "B2")?;
        expect_shape(&c1, m, n, "C1")?;
        expect_shape(&c2, m, n, "C2")?;
        expect_shape(&d21, m, m, "D21")?;
        for (mat, name) in [
            (&a, "A"),
            (&b1, "B1"),
            (&b2, "B2"),
            (&c1, "C1"),
            (&c2, "C2"),
            (&d21, "D21"),
        ] {
            ensure_finite(mat, name)?;
        }
        Ok(Self {
            a,
            b1,
            b2,
            c1,
            c2,
            d21,
        })
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    /// Width of the disturbance channel (and of `z`, `y`).
    pub fn channels(&self) -> usize {
        self.b1.ncols()
    }

    pub fn controls(&self) -> usize {
        self.b2.ncols()
    }

    /// `R = C1 B1 + B1ᵀ C1ᵀ`.
    pub fn r(&self) -> Mat {
        let cb = &self.c1 * &self.b1;
        &cb + cb.transpose()
    }

    /// The `w → z` channel `(A, B1, C1, 0)`.
    pub fn disturbance_channel(&self) -> StateSpace {
        StateSpace {
            a: self.a.clone(),
            b: self.b1.clone(),
            c: self.c1.clone(),
            d: Mat::zeros(self.channels(), self.channels()),
        }
    }
}

/// Uncertainty `Δ(s)` closing the loop `w = Δ z`; assumed SNI.
#[derive(Debug, Clone, PartialEq)]
pub struct SniUncertainty {
    pub a_d: Mat,
    pub b_d: Mat,
    pub c_d: Mat,
    pub d_d: Mat,
}

impl SniUncertainty {
    pub fn new(a_d: Mat, b_d: Mat, c_d: Mat, d_d: Mat) -> Result<Self> {
        let sys = StateSpace::new(a_d, b_d, c_d, d_d)?;
        Ok(Self::from_system(sys))
    }

    pub fn from_system(sys: StateSpace) -> Self {
        Self {
            a_d: sys.a,
            b_d: sys.b,
            c_d: sys.c,
            d_d: sys.d,
        }
    }

    pub fn system(&self) -> StateSpace {
        StateSpace {
            a: self.a_d.clone(),
            b: self.b_d.clone(),
            c: self.c_d.clone(),
            d: self.d_d.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub a1_stabilizable: bool,
    pub a1_detectable: bool,
    pub a2_c1b2_nonsingular: bool,
    pub a3_d21_nonsingular: bool,
    pub a4_r_pd: bool,
    pub r: Mat,
    /// Smallest eigenvalue of `R`.
    pub r_min_eig: f64,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.a1_stabilizable
            && self.a1_detectable
            && self.a2_c1b2_nonsingular
            && self.a3_d21_nonsingular
            && self.a4_r_pd
    }

    /// Names of the failing assumptions, in order.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.a1_stabilizable {
            out.push("A1 (A, B2) stabilizable");
        }
        if !self.a1_detectable {
            out.push("A1 (C2, A) detectable");
        }
        if !self.a2_c1b2_nonsingular {
            out.push("A2 C1B2 nonsingular");
        }
        if !self.a3_d21_nonsingular {
            out.push("A3 D21 nonsingular");
        }
        if !self.a4_r_pd {
            out.push("A4 R > 0");
        }
        out
    }
}

/// Eigenvalues of `a` with `Re ≥ PBH_REAL_PART`, one representative per
/// conjugate pair and per cluster.
fn unstable_modes(a: &Mat) -> Result<Vec<Complex64>> {
    let mut out: Vec<Complex64> = Vec::new();
    for z in eigvals_clustered(a)? {
        if z.re < PBH_REAL_PART || z.im < 0.0 {
            continue;
        }
        if !out
            .iter()
            .any(|w| (w - z).norm() <= 1e-12 * (1.0 + z.norm()))
        {
            out.push(z);
        }
    }
    Ok(out)
}

/// PBH test: `rank [λI − A, B] = n` at every eigenvalue with `Re ≥ −1e−9`.
pub fn pbh_stabilizable(a: &Mat, b: &Mat) -> Result<bool> {
    let n = a.nrows();
    let ac = to_complex(a);
    let bc = to_complex(b);
    for lambda in unstable_modes(a)? {
        let mut m = CMat::zeros(n, n + b.ncols());
        let shifted = CMat::identity(n, n) * lambda - &ac;
        m.view_mut((0, 0), (n, n)).copy_from(&shifted);
        m.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        if complex_rank(&m, PBH_RANK_TOL) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn pbh_detectable(c: &Mat, a: &Mat) -> Result<bool> {
    pbh_stabilizable(&a.transpose(), &c.transpose())
}

pub fn check_assumptions(plant: &UncertainPlant) -> Result<AssumptionReport> {
    let c1b2 = &plant.c1 * &plant.b2;
    let a2 = c1b2.is_square() && condition_number(&c1b2) <= MAX_CONDITION;
    let a3 = condition_number(&plant.d21) <= MAX_CONDITION;
    let r = plant.r();
    let psd = psd_margin(&r, crate::tol::Tolerances::default().psd)?;
    Ok(AssumptionReport {
        a1_stabilizable: pbh_stabilizable(&plant.a, &plant.b2)?,
        a1_detectable: pbh_detectable(&plant.c2, &plant.a)?,
        a2_c1b2_nonsingular: a2,
        a3_d21_nonsingular: a3,
        a4_r_pd: psd.is_pd,
        r,
        r_min_eig: psd.min_eig,
    })
}

/// Strictly proper compensator `ẋk = Ak xk + Bk y`, `u = Ck xk`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicController {
    pub a_k: Mat,
    pub b_k: Mat,
    pub c_k: Mat,
}

impl DynamicController {
    pub fn new(a_k: Mat, b_k: Mat, c_k: Mat) -> Result<Self> {
        let nk = a_k.nrows();
        expect_shape(&a_k, nk, nk, "Ak")?;
        expect_shape(&b_k, nk, b_k.ncols(), "Bk")?;
        expect_shape(&c_k, c_k.nrows(), nk, "Ck")?;
        for (mat, name) in [(&a_k, "Ak"), (&b_k, "Bk"), (&c_k, "Ck")] {
            ensure_finite(mat, name)?;
        }
        Ok(Self { a_k, b_k, c_k })
    }

    pub fn zero(plant: &UncertainPlant) -> Self {
        let n = plant.states();
        Self {
            a_k: Mat::zeros(n, n),
            b_k: Mat::zeros(n, plant.channels()),
            c_k: Mat::zeros(plant.controls(), n),
        }
    }
}

/// Closed loop in the original `(x, xk)` coordinates and in the
/// `(x, x − xk)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub a_c: Mat,
    pub b_c: Mat,
    pub c_c: Mat,
    pub a_cl: Mat,
    pub b_cl: Mat,
    pub c_cl: Mat,
    pub plant: UncertainPlant,
}

impl ClosedLoop {
    pub fn original(&self) -> StateSpace {
        StateSpace {
            a: self.a_c.clone(),
            b: self.b_c.clone(),
            c: self.c_c.clone(),
            d: Mat::zeros(self.c_c.nrows(), self.b_c.ncols()),
        }
    }

    pub fn transformed(&self) -> StateSpace {
        StateSpace {
            a: self.a_cl.clone(),
            b: self.b_cl.clone(),
            c: self.c_cl.clone(),
            d: Mat::zeros(self.c_cl.nrows(), self.b_cl.ncols()),
        }
    }
}

pub fn build_closed_loop(plant: &UncertainPlant, k: &DynamicController) -> Result<ClosedLoop> {
    let n = plant.states();
    let m = plant.channels();
    expect_shape(&k.a_k, n, n, "Ak")?;
    expect_shape(&k.b_k, n, m, "Bk")?;
    expect_shape(&k.c_k, plant.controls(), n, "Ck")?;
    let (a, b1, b2, c1, c2, d21) = (
        &plant.a, &plant.b1, &plant.b2, &plant.c1, &plant.c2, &plant.d21,
    );
    let (ak, bk, ck) = (&k.a_k, &k.b_k, &k.c_k);

    let stack = |tl: &Mat, tr: &Mat, bl: &Mat, br: &Mat| {
        let mut out = Mat::zeros(2 * n, 2 * n);
        out.view_mut((0, 0), (n, n)).copy_from(tl);
        out.view_mut((0, n), (n, n)).copy_from(tr);
        out.view_mut((n, 0), (n, n)).copy_from(bl);
        out.view_mut((n, n), (n, n)).copy_from(br);
        out
    };
    let column = |top: &Mat, bottom: &Mat| {
        let mut out = Mat::zeros(2 * n, m);
        out.view_mut((0, 0), (n, m)).copy_from(top);
        out.view_mut((n, 0), (n, m)).copy_from(bottom);
        out
    };
    let mut c_c = Mat::zeros(m, 2 * n);
    c_c.view_mut((0, 0), (m, n)).copy_from(c1);

    let b2ck = b2 * ck;
    let a_c = stack(a, &b2ck, &(bk * c2), ak);
    let b_c = column(b1, &(bk * d21));
    let a_cl = stack(
        &(a + &b2ck),
        &(-&b2ck),
        &(a - ak + &b2ck - bk * c2),
        &(ak - &b2ck),
    );
    let b_cl = column(b1, &(b1 - bk * d21));
    Ok(ClosedLoop {
        a_c,
        b_c,
        c_cl: c_c.clone(),
        c_c,
        a_cl,
        b_cl,
        plant: plant.clone(),
    })
}

/// Resolvent evaluator that caches the spectrum of `A` for pole-proximity
/// checks across many frequencies.
#[derive(Debug, Clone)]
pub struct FrequencyEvaluator<'a> {
    sys: &'a StateSpace,
    poles: Vec<Complex64>,
    a: CMat,
    b: CMat,
    c: CMat,
    d: CMat,
}

impl<'a> FrequencyEvaluator<'a> {
    pub fn new(sys: &'a StateSpace) -> Result<Self> {
        Ok(Self {
            sys,
            poles: eigvals(&sys.a)?,
            a: to_complex(&sys.a),
            b: to_complex(&sys.b),
            c: to_complex(&sys.c),
            d: to_complex(&sys.d),
        })
    }

    pub fn poles(&self) -> &[Complex64] {
        &self.poles
    }

    /// Distance from `s` to the nearest eigenvalue of `A` (`inf` if none).
    pub fn pole_distance(&self, s: Complex64) -> f64 {
        self.poles
            .iter()
            .map(|p| (p - s).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// `G(s)` at an arbitrary complex point.
    pub fn at(&self, s: Complex64) -> Result<CMat> {
        let distance = self.pole_distance(s);
        if distance <= POLE_DISTANCE {
            return Err(Error::PoleProximity { distance });
        }
        let n = self.sys.states();
        if n == 0 {
            return Ok(self.d.clone());
        }
        let shifted = CMat::identity(n, n) * s - &self.a;
        let x = shifted
            .lu()
            .solve(&self.b)
            .ok_or(Error::PoleProximity { distance })?;
        Ok(&self.c * x + &self.d)
    }

    pub fn at_omega(&self, omega: f64) -> Result<CMat> {
        self.at(Complex64::new(0.0, omega))
    }
}

pub fn freq_response(sys: &StateSpace, omega: f64) -> Result<CMat> {
    if !omega.is_finite() {
        return Err(Error::Domain(format!("frequency {omega} is not finite")));
    }
    FrequencyEvaluator::new(sys)?.at_omega(omega)
}

/// Kalman controllability matrix `[B, AB, …, Aⁿ⁻¹B]`.
pub fn controllability_matrix(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

pub fn minimality_check(sys: &StateSpace) -> (bool, bool) {
    let n = sys.states();
    let controllable = rank(&controllability_matrix(&sys.a, &sys.b), KALMAN_RANK_TOL) == n;
    let observable = rank(
        &controllability_matrix(&sys.a.transpose(), &sys.c.transpose()),
        KALMAN_RANK_TOL,
    ) == n;
    (controllable, observable)
}

/// `(C1B2)⁻¹` with the condition guard.
pub fn c1b2_inverse(plant: &UncertainPlant) -> Result<Mat> {
    let c1b2 = &plant.c1 * &plant.b2;
    if !c1b2.is_square() {
        return Err(Error::Dimension(format!(
            "C1B2 is {}, needs to be square",
            dims(&c1b2)
        )));
    }
    solve_linear(&c1b2, &Mat::identity(c1b2.nrows(), c1b2.nrows()))
}

/// Relative closeness of two complex matrices.
pub fn complex_close(a: &CMat, b: &CMat, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + a.norm().max(b.norm()))
}

/// Frobenius distance between two real matrices relative to their size.
pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    fro(&(a - b)) / (1.0 + fro(a).max(fro(b)))
}

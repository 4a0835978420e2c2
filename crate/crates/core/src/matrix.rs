//! Dense real matrix kernels: eigenvalues, ordered real Schur form,
//! Lyapunov equations, PSD margins and guarded linear solves.
//!
//! The real Schur form is computed by Hessenberg reduction followed by a
//! Francis double-shift QR iteration with exceptional shifts. Diagonal
//! blocks are swapped by solving the small Sylvester equation between them
//! and applying the orthogonal factor of `[-X; I]`.

use nalgebra::linalg::{Hessenberg, SymmetricEigen, QR, SVD};
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;

const ULP: f64 = f64::EPSILON;
const SAFE_MIN: f64 = f64::MIN_POSITIVE;

/// Relative radius within which computed eigenvalues are treated as copies
/// of one (possibly defective) eigenvalue when classifying by half-plane.
const CLUSTER_RADIUS: f64 = 1e-6;

pub fn fro(m: &Mat) -> f64 {
    m.norm()
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn ensure_square(m: &Mat, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Block-diagonal matrix `diag(a, b)`.
pub fn block_diag(a: &Mat, b: &Mat) -> Mat {
    let (n1, m1) = a.shape();
    let (n2, m2) = b.shape();
    let mut out = Mat::zeros(n1 + n2, m1 + m2);
    out.view_mut((0, 0), (n1, m1)).copy_from(a);
    out.view_mut((n1, m1), (n2, m2)).copy_from(b);
    out
}

/// Deterministic eigenvalue order: real part, then imaginary part, then modulus.
pub fn sort_eigenvalues(v: &mut [Complex64]) {
    v.sort_by(|a, b| {
        a.re.total_cmp(&b.re)
            .then(a.im.total_cmp(&b.im))
            .then(a.norm().total_cmp(&b.norm()))
    });
}

// ---------------------------------------------------------------------------
// Real Schur decomposition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    start: usize,
    size: usize,
}

/// Quasi-triangular `t` and orthogonal `u` with `uᵀ m u = t`.
#[derive(Debug, Clone)]
struct RawSchur {
    u: Mat,
    t: Mat,
}

impl RawSchur {
    fn blocks(&self) -> Vec<Block> {
        blocks_of(&self.t)
    }
}

fn blocks_of(t: &Mat) -> Vec<Block> {
    let n = t.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            out.push(Block { start: i, size: 2 });
            i += 2;
        } else {
            out.push(Block { start: i, size: 1 });
            i += 1;
        }
    }
    out
}

fn block_eigenvalues(t: &Mat, b: Block) -> Vec<Complex64> {
    let i = b.start;
    if b.size == 1 {
        return vec![Complex64::new(t[(i, i)], 0.0)];
    }
    let (a, bb, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
    let p = 0.5 * (a - d);
    let disc = p * p + bb * c;
    let mid = 0.5 * (a + d);
    if disc >= 0.0 {
        let r = disc.sqrt();
        vec![Complex64::new(mid + r, 0.0), Complex64::new(mid - r, 0.0)]
    } else {
        let r = (-disc).sqrt();
        vec![Complex64::new(mid, r), Complex64::new(mid, -r)]
    }
}

/// Householder vector for `[alpha; x]` (LAPACK `dlarfg`). Returns `(beta, tau)`
/// and overwrites `x` with the tail of the reflector.
fn householder(alpha: f64, x: &mut [f64]) -> (f64, f64) {
    let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if xnorm == 0.0 {
        return (alpha, 0.0);
    }
    let beta = -alpha.signum() * alpha.hypot(xnorm);
    let tau = (beta - alpha) / beta;
    let scale = 1.0 / (alpha - beta);
    for v in x.iter_mut() {
        *v *= scale;
    }
    (beta, tau)
}

/// Standardized Schur factorization of a real 2x2 block (LAPACK `dlanv2`).
/// Returns the new entries `(a, b, c, d)` and the rotation `(cs, sn)` with
/// `[a b; c d]_old = R [a b; c d]_new Rᵀ`, `R = [cs -sn; sn cs]`.
fn standardize_2x2(mut a: f64, mut b: f64, mut c: f64, mut d: f64) -> ([f64; 4], f64, f64) {
    let mut cs;
    let mut sn;
    if c == 0.0 {
        cs = 1.0;
        sn = 0.0;
    } else if b == 0.0 {
        cs = 0.0;
        sn = 1.0;
        std::mem::swap(&mut a, &mut d);
        b = -c;
        c = 0.0;
    } else if a - d == 0.0 && b.signum() != c.signum() {
        cs = 1.0;
        sn = 0.0;
    } else {
        let temp = a - d;
        let mut p = 0.5 * temp;
        let bcmax = b.abs().max(c.abs());
        let bcmis = b.abs().min(c.abs()) * b.signum() * c.signum();
        let scale = p.abs().max(bcmax);
        let mut z = (p / scale) * p + (bcmax / scale) * bcmis;
        if z >= 4.0 * ULP {
            // Real eigenvalues.
            z = p + p.signum() * scale.sqrt() * z.sqrt();
            a = d + z;
            d -= (bcmax / z) * bcmis;
            let tau = c.hypot(z);
            cs = z / tau;
            sn = c / tau;
            b -= c;
            c = 0.0;
        } else {
            // Complex or nearly equal real eigenvalues: equalize the diagonal.
            let sigma = b + c;
            let tau = sigma.hypot(temp);
            cs = (0.5 * (1.0 + sigma.abs() / tau)).sqrt();
            sn = -(p / (tau * cs)) * sigma.signum();
            let aa = a * cs + b * sn;
            let bb = -a * sn + b * cs;
            let cc = c * cs + d * sn;
            let dd = -c * sn + d * cs;
            a = aa * cs + cc * sn;
            b = bb * cs + dd * sn;
            c = -aa * sn + cc * cs;
            d = -bb * sn + dd * cs;
            let temp = 0.5 * (a + d);
            a = temp;
            d = temp;
            if c != 0.0 {
                if b != 0.0 {
                    if b.signum() == c.signum() {
                        // Real eigenvalues after all: triangularize.
                        let sab = b.abs().sqrt();
                        let sac = c.abs().sqrt();
                        p = (sab * sac).copysign(c);
                        let tau = 1.0 / (b + c).abs().sqrt();
                        a = temp + p;
                        d = temp - p;
                        b -= c;
                        c = 0.0;
                        let cs1 = sab * tau;
                        let sn1 = sac * tau;
                        let t = cs * cs1 - sn * sn1;
                        sn = cs * sn1 + sn * cs1;
                        cs = t;
                    }
                } else {
                    b = -c;
                    c = 0.0;
                    let t = cs;
                    cs = -sn;
                    sn = t;
                }
            }
        }
    }
    ([a, b, c, d], cs, sn)
}

/// Applies the rotation returned by [`standardize_2x2`] to rows/columns
/// `i, i+1` of `t` (outside the block) and to columns of `u`.
fn apply_block_rotation(t: &mut Mat, u: &mut Mat, i: usize, cs: f64, sn: f64) {
    let n = t.nrows();
    for j in i + 2..n {
        let x = t[(i, j)];
        let y = t[(i + 1, j)];
        t[(i, j)] = cs * x + sn * y;
        t[(i + 1, j)] = cs * y - sn * x;
    }
    for r in 0..i {
        let x = t[(r, i)];
        let y = t[(r, i + 1)];
        t[(r, i)] = cs * x + sn * y;
        t[(r, i + 1)] = cs * y - sn * x;
    }
    for r in 0..u.nrows() {
        let x = u[(r, i)];
        let y = u[(r, i + 1)];
        u[(r, i)] = cs * x + sn * y;
        u[(r, i + 1)] = cs * y - sn * x;
    }
}

fn standardize_block_at(t: &mut Mat, u: &mut Mat, i: usize) {
    let ([a, b, c, d], cs, sn) =
        standardize_2x2(t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
    t[(i, i)] = a;
    t[(i, i + 1)] = b;
    t[(i + 1, i)] = c;
    t[(i + 1, i + 1)] = d;
    apply_block_rotation(t, u, i, cs, sn);
}

/// Francis double-shift QR iteration on an upper Hessenberg matrix,
/// accumulating the transformations into `z` (after LAPACK `dlahqr`).
fn hessenberg_qr(h: &mut Mat, z: &mut Mat) -> Result<()> {
    let n = h.nrows();
    if n == 0 {
        return Ok(());
    }
    const EXCEPTIONAL_EVERY: usize = 10;
    let itmax = 30 * n.max(10);
    let smlnum = SAFE_MIN * (n as f64 / ULP);
    let mut kdefl = 0usize;

    // Clear everything below the first subdiagonal.
    for j in 0..n {
        for i in j + 2..n {
            h[(i, j)] = 0.0;
        }
    }

    let mut i = n as isize - 1;
    while i >= 0 {
        let iu = i as usize;
        let mut l = 0usize;
        let mut converged = false;
        for _ in 0..=itmax {
            // Look for a single small subdiagonal element.
            let mut k = iu;
            while k > l {
                if h[(k, k - 1)].abs() <= smlnum {
                    break;
                }
                let mut tst = h[(k - 1, k - 1)].abs() + h[(k, k)].abs();
                if tst == 0.0 {
                    if k >= l + 2 {
                        tst += h[(k - 1, k - 2)].abs();
                    }
                    if k < iu {
                        tst += h[(k + 1, k)].abs();
                    }
                }
                if h[(k, k - 1)].abs() <= ULP * tst {
                    let ab = h[(k, k - 1)].abs().max(h[(k - 1, k)].abs());
                    let ba = h[(k, k - 1)].abs().min(h[(k - 1, k)].abs());
                    let aa = h[(k, k)].abs().max((h[(k - 1, k - 1)] - h[(k, k)]).abs());
                    let bb = h[(k, k)].abs().min((h[(k - 1, k - 1)] - h[(k, k)]).abs());
                    let s = aa + ab;
                    if ba * (ab / s) <= smlnum.max(ULP * (bb * (aa / s))) {
                        break;
                    }
                }
                k -= 1;
            }
            l = k;
            if l > 0 {
                h[(l, l - 1)] = 0.0;
            }
            if l + 1 >= iu {
                converged = true;
                break;
            }
            kdefl += 1;

            // Shifts.
            let (h11, h12, h21, h22);
            if kdefl.is_multiple_of(2 * EXCEPTIONAL_EVERY) {
                let s = h[(iu, iu - 1)].abs() + h[(iu - 1, iu - 2)].abs();
                h11 = 0.75 * s + h[(iu, iu)];
                h12 = -0.4375 * s;
                h21 = s;
                h22 = h11;
            } else if kdefl.is_multiple_of(EXCEPTIONAL_EVERY) {
                let s = h[(l + 1, l)].abs() + h[(l + 2, l + 1)].abs();
                h11 = 0.75 * s + h[(l, l)];
                h12 = -0.4375 * s;
                h21 = s;
                h22 = h11;
            } else {
                h11 = h[(iu - 1, iu - 1)];
                h21 = h[(iu, iu - 1)];
                h12 = h[(iu - 1, iu)];
                h22 = h[(iu, iu)];
            }
            let s = h11.abs() + h12.abs() + h21.abs() + h22.abs();
            let (rt1r, rt1i, rt2r, rt2i);
            if s == 0.0 {
                rt1r = 0.0;
                rt1i = 0.0;
                rt2r = 0.0;
                rt2i = 0.0;
            } else {
                let (h11, h12, h21, h22) = (h11 / s, h12 / s, h21 / s, h22 / s);
                let tr = 0.5 * (h11 + h22);
                let det = (h11 - tr) * (h22 - tr) - h12 * h21;
                let rtdisc = det.abs().sqrt();
                if det >= 0.0 {
                    rt1r = tr * s;
                    rt2r = rt1r;
                    rt1i = rtdisc * s;
                    rt2i = -rt1i;
                } else {
                    let a = tr + rtdisc;
                    let b = tr - rtdisc;
                    let pick = if (a - h22).abs() <= (b - h22).abs() {
                        a
                    } else {
                        b
                    };
                    rt1r = pick * s;
                    rt2r = rt1r;
                    rt1i = 0.0;
                    rt2i = 0.0;
                }
            }

            // Look for two consecutive small subdiagonal elements.
            let mut m = iu - 2;
            let mut v = [0.0f64; 3];
            loop {
                let h21s0 = h[(m + 1, m)];
                let s = (h[(m, m)] - rt2r).abs() + rt2i.abs() + h21s0.abs();
                let h21s = h21s0 / s;
                v[0] = h21s * h[(m, m + 1)] + (h[(m, m)] - rt1r) * ((h[(m, m)] - rt2r) / s)
                    - rt1i * (rt2i / s);
                v[1] = h21s * (h[(m, m)] + h[(m + 1, m + 1)] - rt1r - rt2r);
                v[2] = h21s * h[(m + 2, m + 1)];
                let s = v[0].abs() + v[1].abs() + v[2].abs();
                v.iter_mut().for_each(|x| *x /= s);
                if m == l {
                    break;
                }
                let h00 = h[(m, m - 1)].abs() * (v[1].abs() + v[2].abs());
                let h11 = v[0].abs()
                    * (h[(m - 1, m - 1)].abs() + h[(m, m)].abs() + h[(m + 1, m + 1)].abs());
                if h00 <= ULP * h11 {
                    break;
                }
                m -= 1;
            }

            // Double-shift QR sweep.
            for k in m..iu {
                let nr = 3.min(iu - k + 1);
                if k > m {
                    for r in 0..nr {
                        v[r] = h[(k + r, k - 1)];
                    }
                }
                let (beta, t1) = householder(v[0], &mut v[1..nr]);
                v[0] = beta;
                if k > m {
                    h[(k, k - 1)] = beta;
                    h[(k + 1, k - 1)] = 0.0;
                    if k + 1 < iu {
                        h[(k + 2, k - 1)] = 0.0;
                    }
                } else if m > l {
                    h[(k, k - 1)] *= 1.0 - t1;
                }
                let v2 = v[1];
                let t2 = t1 * v2;
                if nr == 3 {
                    let v3 = v[2];
                    let t3 = t1 * v3;
                    for j in k..n {
                        let sum = h[(k, j)] + v2 * h[(k + 1, j)] + v3 * h[(k + 2, j)];
                        h[(k, j)] -= sum * t1;
                        h[(k + 1, j)] -= sum * t2;
                        h[(k + 2, j)] -= sum * t3;
                    }
                    for j in 0..=(k + 3).min(iu) {
                        let sum = h[(j, k)] + v2 * h[(j, k + 1)] + v3 * h[(j, k + 2)];
                        h[(j, k)] -= sum * t1;
                        h[(j, k + 1)] -= sum * t2;
                        h[(j, k + 2)] -= sum * t3;
                    }
                    for j in 0..n {
                        let sum = z[(j, k)] + v2 * z[(j, k + 1)] + v3 * z[(j, k + 2)];
                        z[(j, k)] -= sum * t1;
                        z[(j, k + 1)] -= sum * t2;
                        z[(j, k + 2)] -= sum * t3;
                    }
                } else if nr == 2 {
                    for j in k..n {
                        let sum = h[(k, j)] + v2 * h[(k + 1, j)];
                        h[(k, j)] -= sum * t1;
                        h[(k + 1, j)] -= sum * t2;
                    }
                    for j in 0..=iu {
                        let sum = h[(j, k)] + v2 * h[(j, k + 1)];
                        h[(j, k)] -= sum * t1;
                        h[(j, k + 1)] -= sum * t2;
                    }
                    for j in 0..n {
                        let sum = z[(j, k)] + v2 * z[(j, k + 1)];
                        z[(j, k)] -= sum * t1;
                        z[(j, k + 1)] -= sum * t2;
                    }
                }
            }
        }
        if !converged {
            return Err(Error::NoConvergence("Schur QR iteration"));
        }
        if l + 1 == iu {
            standardize_block_at(h, z, l);
        }
        kdefl = 0;
        i = l as isize - 1;
    }
    Ok(())
}

fn raw_schur(m: &Mat) -> Result<RawSchur> {
    ensure_square(m, "matrix")?;
    ensure_finite(m, "matrix")?;
    let n = m.nrows();
    if n == 0 {
        return Ok(RawSchur {
            u: Mat::zeros(0, 0),
            t: Mat::zeros(0, 0),
        });
    }
    if n == 1 {
        return Ok(RawSchur {
            u: Mat::identity(1, 1),
            t: m.clone(),
        });
    }
    let (mut u, mut t) = Hessenberg::new(m.clone()).unpack();
    hessenberg_qr(&mut t, &mut u)?;
    Ok(RawSchur { u, t })
}

/// Solves `a x - x b = c` for small `a` (p×p), `b` (q×q) by Kronecker
/// vectorization.
fn small_sylvester(a: &Mat, b: &Mat, c: &Mat) -> Option<Mat> {
    let p = a.nrows();
    let q = b.nrows();
    let mut k = Mat::zeros(p * q, p * q);
    for j in 0..q {
        for i in 0..p {
            let row = j * p + i;
            for l in 0..p {
                k[(row, j * p + l)] += a[(i, l)];
            }
            for l in 0..q {
                k[(row, l * p + i)] -= b[(l, j)];
            }
        }
    }
    let rhs = nalgebra::DVector::from_iterator(p * q, c.iter().copied());
    let x = k.lu().solve(&rhs)?;
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Mat::from_column_slice(p, q, x.as_slice()))
}

/// Swaps the adjacent diagonal blocks starting at `j` (sizes `p`, `q`).
fn swap_blocks(t: &mut Mat, u: &mut Mat, j: usize, p: usize, q: usize) -> Result<()> {
    let n = t.nrows();
    let w = p + q;
    let t11 = t.view((j, j), (p, p)).into_owned();
    let t12 = t.view((j, j + p), (p, q)).into_owned();
    let t22 = t.view((j + p, j + p), (q, q)).into_owned();
    let dnorm = t.view((j, j), (w, w)).amax();
    let x = small_sylvester(&t11, &t22, &t12).ok_or(Error::NoConvergence("Schur block swap"))?;

    let mut basis = Mat::zeros(w, w);
    basis.view_mut((0, 0), (p, q)).copy_from(&(-&x));
    basis.view_mut((p, 0), (q, q)).fill_with_identity();
    basis.view_mut((0, q), (p, p)).fill_with_identity();
    let qf = QR::new(basis).q();

    let rows = t.rows(j, w).into_owned();
    t.rows_mut(j, w).copy_from(&(qf.transpose() * rows));
    let cols = t.columns(j, w).into_owned();
    t.columns_mut(j, w).copy_from(&(cols * &qf));
    let ucols = u.columns(j, w).into_owned();
    u.columns_mut(j, w).copy_from(&(ucols * &qf));

    let leak = t.view((j + q, j), (p, q)).amax();
    if leak > 1e-10 * dnorm.max(SAFE_MIN) {
        return Err(Error::NoConvergence("Schur block swap"));
    }
    t.view_mut((j + q, j), (p, q)).fill(0.0);
    for r in j + w..n {
        for c in j..j + w {
            t[(r, c)] = 0.0;
        }
    }
    if q == 2 {
        standardize_block_at(t, u, j);
    }
    if p == 2 {
        standardize_block_at(t, u, j + q);
    }
    Ok(())
}

/// Groups eigenvalues whose mutual distance is within the cluster radius and
/// returns, for each input eigenvalue, the mean of its cluster.
pub fn cluster_means(eigs: &[Complex64], scale: f64) -> Vec<Complex64> {
    let radius = CLUSTER_RADIUS * scale.max(1.0);
    let n = eigs.len();
    let mut label: Vec<usize> = (0..n).collect();
    fn find(label: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while label[r] != r {
            r = label[r];
        }
        label[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if (eigs[i] - eigs[j]).norm() <= radius {
                let (a, b) = (find(&mut label, i), find(&mut label, j));
                if a != b {
                    label[b.max(a)] = a.min(b);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut label, i)).collect();
    (0..n)
        .map(|i| {
            let members: Vec<Complex64> = (0..n)
                .filter(|&j| roots[j] == roots[i])
                .map(|j| eigs[j])
                .collect();
            members.iter().sum::<Complex64>() / members.len() as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Eigenvalues of a square matrix, in deterministic order (real part, then
/// imaginary part, then modulus). Conjugate pairs are exact conjugates.
pub fn eigvals(m: &Mat) -> Result<Vec<Complex64>> {
    let s = raw_schur(m)?;
    let mut out: Vec<Complex64> = s
        .blocks()
        .into_iter()
        .flat_map(|b| block_eigenvalues(&s.t, b))
        .collect();
    sort_eigenvalues(&mut out);
    Ok(out)
}

/// Eigenvalues with numerically split copies of a repeated eigenvalue
/// replaced by their cluster mean. Used for half-plane classification.
pub fn eigvals_clustered(m: &Mat) -> Result<Vec<Complex64>> {
    let raw = eigvals(m)?;
    let mut out = cluster_means(&raw, fro(m));
    sort_eigenvalues(&mut out);
    Ok(out)
}

/// Largest real part over the (clustered) spectrum; `-inf` for an empty matrix.
pub fn spectral_abscissa(m: &Mat) -> Result<f64> {
    Ok(eigvals_clustered(m)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Ordered real Schur form `uᵀ m u = t` with the stable eigenvalues
/// (`Re ≤ tol_order`, closed left half-plane) in the leading block.
#[derive(Debug, Clone)]
pub struct SchurForm {
    pub u: Mat,
    pub t: Mat,
    pub stable_dim: usize,
}

impl SchurForm {
    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    /// Leading `stable_dim × stable_dim` block of `t`.
    pub fn stable_block(&self) -> Mat {
        let k = self.stable_dim;
        self.t.view((0, 0), (k, k)).into_owned()
    }

    /// Trailing anti-stable block of `t`.
    pub fn unstable_block(&self) -> Mat {
        let k = self.stable_dim;
        let n = self.dim();
        self.t.view((k, k), (n - k, n - k)).into_owned()
    }

    /// Diagonal block eigenvalues in the order they appear on the diagonal.
    pub fn diagonal_eigenvalues(&self) -> Vec<Complex64> {
        blocks_of(&self.t)
            .into_iter()
            .flat_map(|b| block_eigenvalues(&self.t, b))
            .collect()
    }

    /// Size of the largest diagonal block (1 or 2 for a valid form).
    pub fn max_block_size(&self) -> usize {
        blocks_of(&self.t).iter().map(|b| b.size).max().unwrap_or(0)
    }
}

pub fn real_schur_ordered(m: &Mat, tol_order: f64) -> Result<SchurForm> {
    let RawSchur { mut u, mut t } = raw_schur(m)?;
    let n = t.nrows();
    if n == 0 {
        return Ok(SchurForm {
            u,
            t,
            stable_dim: 0,
        });
    }

    // Classify every block by the mean of its eigenvalue cluster.
    let blocks = blocks_of(&t);
    let eig_per_block: Vec<Complex64> = blocks
        .iter()
        .map(|b| block_eigenvalues(&t, *b)[0])
        .collect();
    let all: Vec<Complex64> = blocks
        .iter()
        .flat_map(|b| block_eigenvalues(&t, *b))
        .collect();
    let means = cluster_means(&all, fro(m));
    let mut stable: Vec<(Block, bool)> = Vec::with_capacity(blocks.len());
    let mut idx = 0;
    for (b, _) in blocks.iter().zip(&eig_per_block) {
        stable.push((*b, means[idx].re <= tol_order));
        idx += b.size;
    }

    // Bubble stable blocks to the front, preserving relative order.
    let mut target = 0usize;
    let mut pos = 0usize;
    while pos < stable.len() {
        if stable[pos].1 {
            let mut k = pos;
            while k > target {
                let upper = stable[k - 1].0;
                let lower = stable[k].0;
                swap_blocks(&mut t, &mut u, upper.start, upper.size, lower.size)?;
                let moved = Block {
                    start: upper.start,
                    size: lower.size,
                };
                let pushed = Block {
                    start: upper.start + lower.size,
                    size: upper.size,
                };
                let flag_lower = stable[k].1;
                let flag_upper = stable[k - 1].1;
                stable[k - 1] = (moved, flag_lower);
                stable[k] = (pushed, flag_upper);
                k -= 1;
            }
            target += 1;
        }
        pos += 1;
    }

    let stable_dim = stable.iter().filter(|(_, s)| *s).map(|(b, _)| b.size).sum();
    Ok(SchurForm { u, t, stable_dim })
}

/// Solves `a x + x aᵀ + q = 0` by Bartels–Stewart: real Schur reduction of
/// `a`, then block back-substitution on the quasi-triangular form.
pub fn solve_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    ensure_square(a, "a")?;
    ensure_square(q, "q")?;
    if a.nrows() != q.nrows() {
        return Err(Error::Dimension(format!(
            "a is {}x{} but q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    ensure_finite(q, "q")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let s = raw_schur(a)?;
    let blocks = s.blocks();
    let eigs: Vec<Vec<Complex64>> = blocks.iter().map(|b| block_eigenvalues(&s.t, *b)).collect();
    let resonance = 64.0 * ULP * fro(a).max(SAFE_MIN);
    for (i, ei) in eigs.iter().enumerate() {
        for ej in &eigs[..=i] {
            for x in ei {
                for y in ej {
                    if (x + y).norm() <= resonance {
                        return Err(Error::SingularEquation(format!(
                            "eigenvalues {x:.3e} and {y:.3e} sum to zero"
                        )));
                    }
                }
            }
        }
    }

    let t = &s.t;
    let c = -(s.u.transpose() * q * &s.u);
    let mut y = Mat::zeros(n, n);
    for lb in blocks.iter().rev() {
        for kb in blocks.iter().rev() {
            let (k0, kn) = (kb.start, kb.size);
            let (l0, ln) = (lb.start, lb.size);
            let mut rhs = c.view((k0, l0), (kn, ln)).into_owned();
            let tail_k = k0 + kn;
            if tail_k < n {
                rhs -=
                    t.view((k0, tail_k), (kn, n - tail_k)) * y.view((tail_k, l0), (n - tail_k, ln));
            }
            let tail_l = l0 + ln;
            if tail_l < n {
                rhs -= y.view((k0, tail_l), (kn, n - tail_l))
                    * t.view((l0, tail_l), (ln, n - tail_l)).transpose();
            }
            // t_kk Y + Y t_llᵀ = rhs
            let tkk = t.view((k0, k0), (kn, kn)).into_owned();
            let tll_t = -t.view((l0, l0), (ln, ln)).transpose();
            let blk = small_sylvester(&tkk, &tll_t, &rhs).ok_or_else(|| {
                Error::SingularEquation("singular block in Lyapunov back-substitution".into())
            })?;
            y.view_mut((k0, l0), (kn, ln)).copy_from(&blk);
        }
    }
    let x = &s.u * y * s.u.transpose();
    let sym_q = (q - q.transpose()).norm() <= 1e-14 * q.norm();
    Ok(if sym_q { symmetrize(&x) } else { x })
}

/// Smallest eigenvalue of a symmetric matrix and the PSD / PD decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub min_eig: f64,
    pub is_psd: bool,
    pub is_pd: bool,
    pub tol: f64,
}

impl PsdReport {
    fn from_min(min_eig: f64, tol: f64) -> Self {
        Self {
            min_eig,
            is_psd: min_eig >= -tol,
            is_pd: min_eig > tol,
            tol,
        }
    }
}

pub fn psd_margin(m: &Mat, tol: f64) -> Result<PsdReport> {
    ensure_square(m, "matrix")?;
    ensure_finite(m, "matrix")?;
    if m.nrows() == 0 {
        return Ok(PsdReport::from_min(f64::INFINITY, tol));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-8 * m.norm() {
        return Err(Error::Domain(format!(
            "matrix is not symmetric (‖m - mᵀ‖ = {asym:.3e})"
        )));
    }
    let min_eig = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(PsdReport::from_min(min_eig, tol))
}

/// Smallest eigenvalue of a Hermitian complex matrix (symmetrized first).
pub fn hermitian_min_eig(h: &CMat) -> f64 {
    let herm = (h + h.adjoint()) * Complex64::new(0.5, 0.0);
    SymmetricEigen::new(herm)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn spectral_radius(m: &Mat) -> Result<f64> {
    Ok(eigvals(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// 2-norm condition number from the singular values; `inf` when singular.
pub fn condition_number(a: &Mat) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = SVD::new(a.clone(), false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Ceiling on the condition number accepted by [`solve_linear`].
pub const MAX_CONDITION: f64 = 1e12;

pub fn solve_linear(a: &Mat, b: &Mat) -> Result<Mat> {
    ensure_square(a, "a")?;
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "a has {} rows but b has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    ensure_finite(a, "a")?;
    ensure_finite(b, "b")?;
    if a.nrows() == 0 {
        return Ok(Mat::zeros(0, b.ncols()));
    }
    let cond = condition_number(a);
    if cond.is_nan() || cond > MAX_CONDITION {
        return Err(Error::SingularMatrix { cond });
    }
    a.clone().lu().solve(b).ok_or(Error::SingularMatrix {
        cond: f64::INFINITY,
    })
}

pub fn inverse(a: &Mat) -> Result<Mat> {
    solve_linear(a, &Mat::identity(a.nrows(), a.nrows()))
}

/// Numerical rank with singular values above `rel_tol · σ_max` counted.
pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Smallest singular value of a complex matrix relative to its largest,
/// used for the PBH rank tests.
pub fn complex_rank(m: &CMat, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

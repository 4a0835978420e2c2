//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run alone with `cargo test -p ni-synth --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ni_synth::analysis::{
    attempt_ni_certificate, attempt_sni_certificate, certify_ni_via_are, lemma7_transform,
    ni_freq_check, ni_margin, pr_check_of_shifted, FreqGrid,
};
use ni_synth::fixtures::*;
use ni_synth::matrix::{block_diag, fro, psd_margin, real_schur_ordered, solve_lyapunov};
use ni_synth::riccati::AreProblem;
use ni_synth::ss::{
    build_closed_loop, freq_response, minimality_check, transpose_system, DynamicController,
    StateSpace, UncertainPlant,
};
use ni_synth::synthesis::{
    check_coupling, extract_necessity, solve_closed_loop_sigma, synth_output_feedback,
    verify_closed_loop,
};
use ni_synth::{Error, Mat, Tolerances};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn FnOnce(&mut ChaCha8Rng) -> Outcome>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn max_abs(m: &Mat) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.amax()
    }
}

// ---- random fixtures ----

/// Single-channel plant with entries uniform in [−2, 2]; discards plants with a nearly singular R or D21.
fn random_plant(rng: &mut ChaCha8Rng, n: usize) -> Option<UncertainPlant> {
    let mut take = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0));
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

/// Sum of first-order lags `ψψᵀ/(s + a)` and damped modes
/// `ψψᵀ/(s² + 2ζωs + ω²)` behind a random change of coordinates, with a
/// symmetric feedthrough. Every such system is NI, and SNI as well since
/// all modes are damped.
fn ni_system(rng: &mut ChaCha8Rng) -> StateSpace {
    let m = rng.random_range(1..=2usize);
    let lags = m + rng.random_range(0..=1usize);
    let modes = rng.random_range(0..=2usize);
    let mut a = Mat::zeros(0, 0);
    let mut b = Mat::zeros(0, m);
    let mut c = Mat::zeros(m, 0);
    let mut push = |blk_a: Mat, blk_b: Mat, blk_c: Mat| {
        a = block_diag(&a, &blk_a);
        let n = b.nrows();
        let mut nb = Mat::zeros(n + blk_b.nrows(), m);
        nb.view_mut((0, 0), (n, m)).copy_from(&b);
        nb.view_mut((n, 0), blk_b.shape()).copy_from(&blk_b);
        b = nb;
        let mut nc = Mat::zeros(m, n + blk_c.ncols());
        nc.view_mut((0, 0), (m, n)).copy_from(&c);
        nc.view_mut((0, n), blk_c.shape()).copy_from(&blk_c);
        c = nc;
    };
    for _ in 0..lags {
        let psi = randn(rng, m, 1);
        let pole: f64 = rng.random_range(0.2..5.0);
        push(Mat::from_element(1, 1, -pole), psi.transpose(), psi);
    }
    for _ in 0..modes {
        let psi = randn(rng, m, 1);
        let w: f64 = rng.random_range(0.5..5.0);
        let zeta: f64 = rng.random_range(0.05..0.5);
        let blk_a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -w * w, -2.0 * zeta * w]);
        let mut blk_b = Mat::zeros(2, m);
        blk_b.row_mut(1).copy_from(&psi.transpose());
        let mut blk_c = Mat::zeros(m, 2);
        blk_c.column_mut(0).copy_from(&psi);
        push(blk_a, blk_b, blk_c);
    }
    let n = a.nrows();
    let t = randn(rng, n, n) * 0.3 + Mat::identity(n, n);
    let t_inv = t
        .clone()
        .try_inverse()
        .expect("perturbed identity is invertible");
    let d = randn(rng, m, m);
    StateSpace::new(
        &t * a * &t_inv,
        &t * b,
        c * t_inv,
        (&d + d.transpose()) * 0.5,
    )
    .expect("dimensions agree")
}

/// Stable square system with random data; NI only by accident.
fn random_stable(rng: &mut ChaCha8Rng) -> StateSpace {
    let n = rng.random_range(1..=4usize);
    let m = rng.random_range(1..=2usize);
    let a = randn(rng, n, n) - Mat::identity(n, n) * 3.0;
    StateSpace::new(a, randn(rng, n, m), randn(rng, m, n), Mat::zeros(m, m)).unwrap()
}

fn highpass() -> StateSpace {
    let one = |x: f64| Mat::from_element(1, 1, x);
    StateSpace::new(one(-1.0), one(1.0), one(-1.0), one(1.0)).unwrap()
}

fn grid_100() -> FreqGrid {
    FreqGrid::log_spaced(1e-3, 1e3, 100, 1e-8).unwrap()
}

// ---- criteria ----

fn ex1_synthesis() -> Outcome {
    let start = Instant::now();
    let report = synth_output_feedback(&ex1_plant()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let k = ex1_controller();
    let diff = [
        max_abs(&(&report.controller.a_k - &k.a_k)),
        max_abs(&(&report.controller.b_k - &k.b_k)),
        max_abs(&(&report.controller.c_k - &k.c_k)),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    check(
        diff <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max |K − K_printed| = {diff:.2e}, runtime {elapsed:.2?}"),
    )
}

fn ex1_closed_loop() -> Outcome {
    let cl = build_closed_loop(&ex1_plant(), &ex1_controller()).map_err(err)?;
    let exact = cl.a_cl == ex1_printed_a_cl()
        && cl.b_cl == ex1_printed_b_cl()
        && cl.c_cl == ex1_printed_c_cl();
    let printed = verify_closed_loop(&cl, &ex1_printed_sigma(), 1e-3).map_err(err)?;
    let report = synth_output_feedback(&ex1_plant()).map_err(|e| e.to_string())?;
    let v_err = max_abs(&(&report.vc.v - ex1_printed_v()));
    check(
        exact && printed.residual.within(5e-3) && printed.psd.is_psd && v_err <= 1e-3,
        format!(
            "A_cl/B_cl/C_cl exact: {exact}, printed Σ residual {:.3e} (min eig {:.2e}), max |V − V_printed| = {v_err:.2e}",
            printed.residual.relative(),
            printed.psd.min_eig
        ),
    )
}

fn ex1_certificates() -> Outcome {
    let plant = ex1_plant();
    let zero = Mat::zeros(3, 3);
    let ra = AreProblem::condition_a(&plant, &ex1_f())
        .map_err(err)?
        .residual(&zero)
        .map_err(err)?;
    let rb = AreProblem::condition_b(&plant, &ex1_l())
        .map_err(err)?
        .residual(&zero)
        .map_err(err)?;
    // Q̃ = C1(A + B2F) − B1ᵀP and Q̄ = B1 + LD21 − ZAᵀC1ᵀ at P = Z = 0
    let q_tilde = &plant.c1 * (&plant.a + &plant.b2 * ex1_f());
    let q_bar = &plant.b1 + ex1_l() * &plant.d21;
    let (rho, strict, _) = check_coupling(&zero, &zero).map_err(err)?;
    check(
        ra.norm == 0.0
            && rb.norm == 0.0
            && max_abs(&q_tilde) == 0.0
            && max_abs(&q_bar) == 0.0
            && rho == 0.0
            && strict,
        format!(
            "residuals (a) {:e}, (b) {:e}, ρ(ZP) = {rho}",
            ra.norm, rb.norm
        ),
    )
}

fn lyapunov_oracle(rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=6usize);
        let a = randn(rng, n, n);
        let q0 = randn(rng, n, n);
        let q = &q0 + q0.transpose();
        let x = solve_lyapunov(&a, &q).map_err(err)?;
        let eye = Mat::identity(n, n);
        let k = eye.kronecker(&a) + a.kronecker(&eye);
        let rhs = -DMatrix::from_column_slice(n * n, 1, q.as_slice());
        let vec_x = k.lu().solve(&rhs).ok_or("Kronecker system is singular")?;
        let oracle = Mat::from_column_slice(n, n, vec_x.as_slice());
        worst = worst.max(fro(&(&x - &oracle)) / fro(&oracle).max(f64::MIN_POSITIVE));
    }
    check(
        worst <= 1e-8,
        format!("100 instances, worst relative difference {worst:.2e}"),
    )
}

fn schur_invariants(rng: &mut ChaCha8Rng) -> Outcome {
    let tol_order = Tolerances::default().order;
    let (mut orth, mut spec, mut recon) = (0.0f64, 0.0f64, 0.0f64);
    let mut order_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=8usize);
        let m = randn(rng, n, n);
        let s = real_schur_ordered(&m, tol_order).map_err(err)?;
        let eye = Mat::identity(n, n);
        orth = orth.max(fro(&(s.u.transpose() * &s.u - &eye)) / n as f64);
        recon = recon.max(fro(&(&s.u * &s.t * s.u.transpose() - &m)) / fro(&m));
        let diag = s.diagonal_eigenvalues();
        let mut oracle: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
        for z in &diag {
            let (i, d) = oracle
                .iter()
                .enumerate()
                .map(|(i, w)| (i, (z - w).norm()))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .ok_or("spectrum size mismatch")?;
            spec = spec.max(d / fro(&m).max(1.0));
            oracle.swap_remove(i);
        }
        let k = s.stable_dim;
        order_ok &= diag[..k].iter().all(|z| z.re <= tol_order)
            && diag[k..].iter().all(|z| z.re > tol_order)
            && s.max_block_size() <= 2;
    }
    check(
        orth <= 1e-10 && spec <= 1e-8 && recon <= 1e-10 && order_ok,
        format!(
            "100 matrices: ‖UᵀU − I‖/n ≤ {orth:.2e}, eigenvalue error ≤ {spec:.2e}, reconstruction ≤ {recon:.2e}, ordering holds: {order_ok}"
        ),
    )
}

fn definition_consistency(rng: &mut ChaCha8Rng) -> Outcome {
    let tol = Tolerances::default();
    let grid = grid_100();
    let (mut certified, mut attempts) = (0usize, 0usize);
    let (mut worst_margin, mut duality) = (f64::INFINITY, 0.0f64);
    let mut lemma3 = 0usize;
    let mut failures = Vec::new();
    while certified < 20 && attempts < 200 {
        attempts += 1;
        let sys = ni_system(rng);
        if certify_ni_via_are(&sys, &tol).is_err() {
            continue;
        }
        certified += 1;
        let ni = ni_freq_check(&sys, &grid).map_err(err)?;
        worst_margin = worst_margin.min(ni.worst_margin());
        if !ni.verdict() || ni.check.margins.len() != 100 {
            failures.push(format!(
                "grid check failed (worst {:.2e})",
                ni.worst_margin()
            ));
        }
        let dual = transpose_system(&sys);
        for &w in &grid.omegas {
            let g = ni_margin(&freq_response(&sys, w).map_err(err)?);
            let gt = ni_margin(&freq_response(&dual, w).map_err(err)?);
            duality = duality.max((g - gt).abs() / g.abs().max(1.0));
        }
    }
    if certified < 20 {
        failures.push(format!(
            "only {certified} of {attempts} generated systems certified"
        ));
    }
    // NI verdict against the PR verdict of s(G − D), on NI systems and on systems that are not NI.
    let mut fixtures: Vec<StateSpace> = (0..20).map(|_| ni_system(rng)).collect();
    fixtures.extend((0..20).map(|_| random_stable(rng)));
    fixtures.push(highpass());
    let mut not_ni = 0;
    for sys in &fixtures {
        let ni = ni_freq_check(sys, &grid).map_err(err)?;
        let pr = pr_check_of_shifted(sys, &grid).map_err(err)?;
        not_ni += usize::from(!ni.verdict());
        if ni.verdict() == pr.verdict {
            lemma3 += 1;
        } else {
            failures.push(format!(
                "NI verdict {} but PR verdict {}",
                ni.verdict(),
                pr.verdict
            ));
        }
    }
    if duality > 1e-10 {
        failures.push(format!("duality gap {duality:.2e}"));
    }
    let detail = format!(
        "{certified} certified systems, worst grid margin {worst_margin:.2e}, duality gap {duality:.2e}, NI/PR verdicts agree on {lemma3}/{} fixtures ({not_ni} not NI)",
        fixtures.len()
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn inverse_transform(rng: &mut ChaCha8Rng) -> Outcome {
    let tol = Tolerances::default();
    let (mut found, mut attempts, mut worst) = (0usize, 0usize, 0.0f64);
    while found < 10 && attempts < 200 {
        attempts += 1;
        let sys = ni_system(rng);
        let Ok(cert) = attempt_sni_certificate(&sys, &tol) else {
            continue;
        };
        if !cert.psd.is_pd || cert.residual.relative() > 1e-10 {
            continue;
        }
        found += 1;
        let (_, residual) = lemma7_transform(&cert.solution, &sys).map_err(err)?;
        worst = worst.max(residual.relative());
    }
    check(
        found == 10 && worst <= 1e-6,
        format!("{found} fixtures with PD solutions ({attempts} drawn), worst transformed residual {worst:.2e}"),
    )
}

fn block_residuals(rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst = 0.0f64;
    let mut record = |r: &ni_synth::synthesis::SynthesisReport| {
        let b = r.verification.blocks;
        for x in [b.x11, b.x21, b.x22] {
            worst = worst.max(x.relative());
        }
    };
    record(&synth_output_feedback(&ex1_plant()).map_err(|e| e.to_string())?);
    let (mut random, mut attempts) = (0usize, 0usize);
    while random < 8 && attempts < 1000 {
        attempts += 1;
        let n = rng.random_range(2..=4usize);
        let Some(plant) = random_plant(rng, n) else {
            continue;
        };
        if let Ok(report) = synth_output_feedback(&plant) {
            random += 1;
            record(&report);
        }
    }
    check(
        random >= 5 && worst <= 1e-8,
        format!("EX1 plus {random} random syntheses ({attempts} plants drawn), worst block residual {worst:.2e}"),
    )
}

fn necessity(rng: &mut ChaCha8Rng) -> Outcome {
    let tol = Tolerances::default();
    let (mut passed, mut attempts, mut gated) = (0usize, 0usize, 0usize);
    let (mut worst_res, mut worst_rho) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    while passed < 10 && attempts < 40_000 {
        attempts += 1;
        let n = rng.random_range(2..=3usize);
        let Some(plant) = random_plant(rng, n) else {
            continue;
        };
        if synth_output_feedback(&plant).is_err() {
            continue;
        }
        let k = DynamicController::new(
            randn(rng, n, n) - Mat::identity(n, n) * 2.0,
            randn(rng, n, 1),
            randn(rng, 1, n),
        )
        .map_err(err)?;
        let Ok(cl) = build_closed_loop(&plant, &k) else {
            continue;
        };
        let sys = cl.original();
        let Ok(grid) = FreqGrid::default_for(&sys, tol.freq) else {
            continue;
        };
        let Ok(sni) = ni_synth::analysis::sni_freq_check(&sys, &grid) else {
            continue;
        };
        let (c, o) = minimality_check(&sys);
        if !(sni.verdict && c && o) {
            continue;
        }
        let Ok((sigma, _)) = solve_closed_loop_sigma(&cl) else {
            continue;
        };
        if !psd_margin(&sigma, tol.psd).is_ok_and(|p| p.is_pd) {
            continue;
        }
        gated += 1;
        match extract_necessity(&cl, &k, &sigma, &tol) {
            Ok(ex) => {
                passed += 1;
                worst_res = worst_res
                    .max(ex.residual_a.relative())
                    .max(ex.residual_b.relative());
                worst_rho = worst_rho.max(ex.rho_zp);
                if !ex.holds() {
                    failures.push(format!(
                        "P pd {}, Z pd {}, ρ {:.3e}, residuals {:.2e}/{:.2e}",
                        ex.p_psd.is_pd,
                        ex.z_psd.is_pd,
                        ex.rho_zp,
                        ex.residual_a.relative(),
                        ex.residual_b.relative()
                    ));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    let detail = format!(
        "{passed} SNI, minimal loops ({gated} gated, {attempts} drawn), worst (a)/(b) residual {worst_res:.2e}, worst ρ(ZP) = 1 − {:.2e}",
        1.0 - worst_rho
    );
    if passed >= 10 && failures.is_empty() && worst_res <= 1e-6 && worst_rho <= 1.0 + 1e-8 {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn negative_control() -> Outcome {
    let sys = highpass();
    let at_one = ni_freq_check(&sys, &FreqGrid::new(vec![1.0], 1e-8).map_err(err)?).map_err(err)?;
    let sweep = ni_freq_check(&sys, &grid_100()).map_err(err)?;
    let refused = matches!(
        certify_ni_via_are(&sys, &Tolerances::default()),
        Err(Error::Certification(_))
    );
    let attempt_valid =
        attempt_ni_certificate(&sys, &Tolerances::default()).is_ok_and(|c| c.is_valid());
    check(
        at_one.worst_margin() < -0.5 && !sweep.verdict() && refused && !attempt_valid,
        format!(
            "margin at ω = 1 is {:.3}, grid verdict {}, certification refused: {refused}",
            at_one.worst_margin(),
            sweep.verdict()
        ),
    )
}

fn main() -> ExitCode {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e_ed);
    let criteria: Vec<Criterion> = vec![
        (
            "EX1 synthesis reproduces the printed compensator",
            Box::new(|_| ex1_synthesis()),
        ),
        (
            "EX1 closed loop, printed Σ and V",
            Box::new(|_| ex1_closed_loop()),
        ),
        (
            "EX1 certificates P = Z = 0",
            Box::new(|_| ex1_certificates()),
        ),
        (
            "Lyapunov solver vs Kronecker oracle",
            Box::new(lyapunov_oracle),
        ),
        ("ordered Schur invariants", Box::new(schur_invariants)),
        ("NI definitions agree", Box::new(definition_consistency)),
        (
            "inverse of an SNI solution solves the transformed equation",
            Box::new(inverse_transform),
        ),
        (
            "closed-loop block residuals vanish",
            Box::new(block_residuals),
        ),
        ("necessity round trip", Box::new(necessity)),
        ("s/(s+1) is rejected", Box::new(|_| negative_control())),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut rng)))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of 10 criteria pass", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

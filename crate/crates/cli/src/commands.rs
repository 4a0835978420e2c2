//! The `analyze`, `synth`, `verify` and `freq` commands. Each returns its
//! exit code and output text rather than printing, so tests can drive them
//! in process.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ni_synth::analysis::{
    attempt_ni_certificate, attempt_sni_certificate, ni_freq_check, ni_margin, sni_freq_check,
    solution_psd_tol, FreqGrid, NiCertificate, GRID_POLE_GAP,
};
use ni_synth::matrix::psd_margin;
use ni_synth::riccati::AreProblem;
use ni_synth::ss::{
    build_closed_loop, check_assumptions, FrequencyEvaluator, StateSpace, UncertainPlant,
};
use ni_synth::synthesis::{
    synth_output_feedback_with, synth_state_feedback, verify_closed_loop, FailureKind,
    SynthesisReport,
};
use ni_synth::{Error, Mat, Residual, Tolerances};
use num_complex::Complex64;
use serde_json::{json, Map, Value};

use crate::doc::{
    self, from_mat, to_mat, Certificates, ControllerDocument, ControllerMatrices, Document,
    InputError, Mode, PlantMatrices, StateFeedbackMatrices, ToleranceDoc,
};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable overriding the default residual tolerance.
pub const TOL_ENV: &str = "NI_SYNTH_TOL";

#[derive(Debug, Parser)]
#[command(
    name = "ni-synth",
    version,
    about = "Negative imaginary output-feedback synthesis and analysis"
)]
pub struct Cli {
    /// Machine-readable JSON report on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check assumptions and NI/SNI properties of a plant, system or controller loop.
    Analyze {
        /// Plant, system or controller document.
        path: PathBuf,
        /// Property that must hold for exit status 0 (repeatable).
        #[arg(long, value_enum)]
        require: Vec<Property>,
        #[command(flatten)]
        grid: GridArgs,
        /// Relative residual tolerance (overrides NI_SYNTH_TOL).
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Synthesize a controller for a plant.
    Synth {
        /// Plant document.
        path: PathBuf,
        /// Output feedback or state feedback.
        #[arg(long, value_enum, default_value = "of")]
        mode: SynthMode,
        /// Where to write the controller document.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Relative residual tolerance (overrides NI_SYNTH_TOL).
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Re-check a controller document against a plant.
    Verify {
        plant: PathBuf,
        controller: PathBuf,
        /// Relative residual tolerance (overrides NI_SYNTH_TOL).
        #[arg(long)]
        tol: Option<f64>,
        /// Use this Σ instead of the one stored in the document.
        #[arg(long)]
        sigma: Option<PathBuf>,
    },
    /// Frequency sweep of G(jω) and the NI margin λmin(j(G − G*)).
    Freq {
        /// Plant, system or controller document.
        path: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Tolerance on the NI margin.
        #[arg(long)]
        tol: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Property {
    Ni,
    Sni,
    NiCert,
    SniCert,
}

impl Property {
    fn name(self) -> &'static str {
        match self {
            Property::Ni => "ni",
            Property::Sni => "sni",
            Property::NiCert => "ni-cert",
            Property::SniCert => "sni-cert",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthMode {
    Of,
    Sf,
}

#[derive(Debug, Clone, Copy, Default, Args)]
pub struct GridArgs {
    /// Lowest frequency in rad/s [default: 1e-3].
    #[arg(long)]
    pub omega_min: Option<f64>,
    /// Highest frequency in rad/s [default: 1e3].
    #[arg(long)]
    pub omega_max: Option<f64>,
    /// Number of log-spaced points [default: 200].
    #[arg(long)]
    pub points: Option<usize>,
}

impl GridArgs {
    fn given(&self) -> bool {
        self.omega_min.is_some() || self.omega_max.is_some() || self.points.is_some()
    }

    fn grid(&self, tol: f64) -> Result<FreqGrid, Error> {
        FreqGrid::log_spaced(
            self.omega_min.unwrap_or(1e-3),
            self.omega_max.unwrap_or(1e3),
            self.points.unwrap_or(200),
            tol,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Human lines and the JSON object of one report, built side by side.
struct Report {
    json_mode: bool,
    lines: Vec<String>,
    fields: Map<String, Value>,
    errors: Vec<String>,
}

impl Report {
    fn new(json_mode: bool, command: &str, tol: Option<&Tolerances>) -> Self {
        let mut r = Self {
            json_mode,
            lines: Vec::new(),
            fields: Map::new(),
            errors: Vec::new(),
        };
        r.set("command", json!(command));
        if let Some(t) = tol {
            r.set(
                "tolerances",
                serde_json::to_value(ToleranceDoc::from(t)).unwrap(),
            );
            r.line(format!(
                "tolerances: residual {}, psd {}, freq {}",
                sig6(t.residual),
                sig6(t.psd),
                sig6(t.freq)
            ));
        }
        r
    }

    fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    fn set(&mut self, key: &str, v: Value) {
        self.fields.insert(key.to_string(), v);
    }

    fn error(&mut self, s: impl Into<String>) {
        self.errors.push(s.into());
    }

    fn finish(mut self, code: i32) -> Outcome {
        self.set("exit_code", json!(code));
        if !self.errors.is_empty() {
            self.set("errors", json!(self.errors));
        }
        let stdout = if self.json_mode {
            let mut s = serde_json::to_string_pretty(&Value::Object(self.fields)).unwrap();
            s.push('\n');
            s
        } else {
            self.lines.iter().map(|l| format!("{l}\n")).collect()
        };
        let stderr = self
            .errors
            .iter()
            .map(|l| format!("error: {l}\n"))
            .collect();
        Outcome {
            code,
            stdout,
            stderr,
        }
    }
}

fn input_failure(json_mode: bool, command: &str, e: InputError) -> Outcome {
    let mut r = Report::new(json_mode, command, None);
    r.error(e.0);
    r.finish(EXIT_INPUT)
}

fn code_for(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// Six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor();
    if (-4.0..6.0).contains(&e) {
        format!("{:.*}", (5.0 - e) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

fn matrix_lines(name: &str, m: &Mat) -> Vec<String> {
    let mut out = vec![format!("{name} ({}x{}):", m.nrows(), m.ncols())];
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{:>13}", sig6(m[(i, j)])))
            .collect();
        out.push(format!("  {}", row.join(" ")));
    }
    out
}

pub fn tolerances(flag: Option<f64>) -> Result<Tolerances, InputError> {
    let check = |v: f64, what: &str| {
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(InputError(format!(
                "{what} must be a positive number, got {v}"
            )))
        }
    };
    let mut t = Tolerances::default();
    if let Ok(text) = std::env::var(TOL_ENV) {
        let v: f64 = text
            .trim()
            .parse()
            .map_err(|_| InputError(format!("{TOL_ENV}={text} is not a number")))?;
        t = t.with_residual(check(v, TOL_ENV)?);
    }
    if let Some(v) = flag {
        t = t.with_residual(check(v, "--tol")?);
    }
    Ok(t)
}

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Analyze {
            path,
            require,
            grid,
            tol,
        } => analyze(cli.json, path, require, grid, *tol),
        Command::Synth {
            path,
            mode,
            out,
            tol,
        } => synth(cli.json, path, *mode, out.as_deref(), *tol),
        Command::Verify {
            plant,
            controller,
            tol,
            sigma,
        } => verify(cli.json, plant, controller, *tol, sigma.as_deref()),
        Command::Freq {
            path,
            grid,
            csv,
            tol,
        } => freq(cli.json, path, grid, csv.as_deref(), *tol),
    }
}

/// `(A + B2K, B1, C1)`.
fn state_feedback_loop(plant: &UncertainPlant, k: &Mat) -> Result<StateSpace, Error> {
    StateSpace::strictly_proper(&plant.a + &plant.b2 * k, plant.b1.clone(), plant.c1.clone())
}

fn controller_loop(c: &ControllerDocument) -> Result<(UncertainPlant, StateSpace), InputError> {
    let plant = c.plant.to_plant()?;
    let sys = match c.mode {
        Mode::OutputFeedback => {
            let k = c
                .controller
                .as_ref()
                .ok_or_else(|| InputError("output-feedback document has no \"controller\"".into()))?
                .to_controller()?;
            build_closed_loop(&plant, &k)?.transformed()
        }
        Mode::StateFeedback => {
            let k = c.state_feedback.as_ref().ok_or_else(|| {
                InputError("state-feedback document has no \"state_feedback\"".into())
            })?;
            state_feedback_loop(&plant, &to_mat(&k.k, "K")?)?
        }
    };
    Ok((plant, sys))
}

/// The system a document stands for: a plant's disturbance channel, a
/// plain system, or a controller document's closed loop.
fn target_system(d: &Document) -> Result<(StateSpace, &'static str), InputError> {
    match d {
        Document::Plant(p) => Ok((
            p.plant.to_plant()?.disturbance_channel(),
            "disturbance channel (A, B1, C1)",
        )),
        Document::System(s) => Ok((s.system.to_system()?, "system")),
        Document::Controller(c) => Ok((controller_loop(c)?.1, "closed loop")),
    }
}

fn certificate_summary(
    cert: &Result<NiCertificate, Error>,
) -> (Result<bool, Error>, String, Value) {
    match cert {
        Ok(c) => {
            let valid = c.is_valid();
            let text = if valid {
                format!(
                    "valid ({} equation, relative residual {}, smallest eigenvalue {})",
                    c.kind.name(),
                    sig6(c.residual.relative()),
                    sig6(c.psd.min_eig)
                )
            } else {
                format!("failed: {}", c.failure().unwrap_or_default())
            };
            let v = json!({
                "valid": valid,
                "kind": c.kind.name(),
                "relative_residual": c.residual.relative(),
                "min_eig": c.psd.min_eig,
                "failure": c.failure(),
            });
            (Ok(valid), text, v)
        }
        // A system whose R is not positive definite has no certificate.
        Err(Error::Domain(msg) | Error::Certification(msg)) => (
            Ok(false),
            format!("failed: {msg}"),
            json!({"valid": false, "failure": msg}),
        ),
        Err(e) => (
            Err(e.clone()),
            format!("error: {e}"),
            json!({"valid": false, "error": e.to_string()}),
        ),
    }
}

fn analyze(
    json_mode: bool,
    path: &Path,
    require: &[Property],
    grid_args: &GridArgs,
    tol: Option<f64>,
) -> Outcome {
    let tol = match tolerances(tol) {
        Ok(t) => t,
        Err(e) => return input_failure(json_mode, "analyze", e),
    };
    let document = match doc::load(path) {
        Ok(d) => d,
        Err(e) => return input_failure(json_mode, "analyze", e),
    };
    let mut r = Report::new(json_mode, "analyze", Some(&tol));
    let (sys, label) = match target_system(&document) {
        Ok(s) => s,
        Err(e) => {
            r.error(e.0);
            return r.finish(EXIT_INPUT);
        }
    };

    let mut code = EXIT_PASS;
    let mut required: Vec<Property> = require.to_vec();
    if let Document::Plant(p) = &document {
        let plant = match p.plant.to_plant() {
            Ok(p) => p,
            Err(e) => {
                r.error(e.0);
                return r.finish(EXIT_INPUT);
            }
        };
        match check_assumptions(&plant) {
            Ok(a) => {
                let rows = [
                    ("A1 (A, B2) stabilizable", a.a1_stabilizable),
                    ("A1 (C2, A) detectable", a.a1_detectable),
                    ("A2 C1B2 nonsingular", a.a2_c1b2_nonsingular),
                    ("A3 D21 nonsingular", a.a3_d21_nonsingular),
                    ("A4 R = C1B1 + B1ᵀC1ᵀ > 0", a.a4_r_pd),
                ];
                r.line("assumptions:");
                for (name, ok) in rows {
                    r.line(format!("  {name}: {}", if ok { "pass" } else { "FAIL" }));
                }
                r.line(format!("  smallest eigenvalue of R: {}", sig6(a.r_min_eig)));
                r.set(
                    "assumptions",
                    json!({
                        "a1_stabilizable": a.a1_stabilizable,
                        "a1_detectable": a.a1_detectable,
                        "a2_c1b2_nonsingular": a.a2_c1b2_nonsingular,
                        "a3_d21_nonsingular": a.a3_d21_nonsingular,
                        "a4_r_pd": a.a4_r_pd,
                        "r_min_eig": a.r_min_eig,
                        "all_hold": a.all_hold(),
                    }),
                );
                if !a.all_hold() {
                    r.error(format!("assumptions violated: {}", a.failures().join(", ")));
                    code = EXIT_INPUT;
                }
            }
            Err(e) => {
                r.error(format!("assumption check failed: {e}"));
                return r.finish(code_for(&e));
            }
        }
        if let Some(u) = &p.uncertainty {
            match u.to_system().and_then(|d| {
                let grid = FreqGrid::default_for(&d, tol.freq)?;
                Ok(sni_freq_check(&d, &grid)?)
            }) {
                Ok(c) => {
                    r.line(format!("uncertainty SNI on grid: {}", c.verdict));
                    r.set("uncertainty_sni", json!(c.verdict));
                }
                Err(e) => r.error(format!("uncertainty: {e}")),
            }
        }
    } else if required.is_empty() {
        required.push(Property::Ni);
    }

    r.line(format!(
        "analyzed {label}: {} states, {}x{}",
        sys.states(),
        sys.outputs(),
        sys.inputs()
    ));
    r.set("target", json!(label));
    let grid = if grid_args.given() {
        grid_args.grid(tol.freq)
    } else {
        FreqGrid::default_for(&sys, tol.freq)
    };
    let grid = match grid {
        Ok(g) => g,
        Err(e) => {
            r.error(e.to_string());
            return r.finish(code_for(&e).max(code));
        }
    };

    let mut results: BTreeMap<&'static str, Result<bool, Error>> = BTreeMap::new();
    match ni_freq_check(&sys, &grid) {
        Ok(c) => {
            r.line(format!(
                "NI on grid: {} (worst margin {}, stable {}, axis-pole conditions {}, {} points skipped)",
                c.verdict(),
                sig6(c.worst_margin()),
                c.stable,
                if c.poles.passes() { "pass" } else { "FAIL" },
                c.check.skipped.len()
            ));
            r.set(
                "ni",
                json!({
                    "verdict": c.verdict(),
                    "worst_margin": c.worst_margin(),
                    "stable": c.stable,
                    "pole_conditions": c.poles.passes(),
                    "skipped": c.check.skipped,
                }),
            );
            results.insert("ni", Ok(c.verdict()));
        }
        Err(e) => {
            r.line(format!("NI on grid: error: {e}"));
            results.insert("ni", Err(e));
        }
    }
    match sni_freq_check(&sys, &grid) {
        Ok(c) => {
            r.line(format!(
                "SNI on grid: {} (worst margin {}, spectral abscissa {})",
                c.verdict,
                sig6(c.worst_margin),
                sig6(c.abscissa)
            ));
            r.set(
                "sni",
                json!({"verdict": c.verdict, "worst_margin": c.worst_margin, "abscissa": c.abscissa}),
            );
            results.insert("sni", Ok(c.verdict));
        }
        Err(e) => {
            r.line(format!("SNI on grid: error: {e}"));
            results.insert("sni", Err(e));
        }
    }
    for (key, cert) in [
        ("ni-cert", attempt_ni_certificate(&sys, &tol)),
        ("sni-cert", attempt_sni_certificate(&sys, &tol)),
    ] {
        let (verdict, text, v) = certificate_summary(&cert);
        r.line(format!(
            "{} certificate: {text}",
            if key == "ni-cert" { "NI" } else { "SNI" }
        ));
        r.set(&key.replace('-', "_"), v);
        results.insert(key, verdict);
    }

    r.set(
        "required",
        json!(required.iter().map(|p| p.name()).collect::<Vec<_>>()),
    );
    for p in &required {
        match &results[p.name()] {
            Ok(true) => {}
            Ok(false) => {
                r.error(format!("required property {} does not hold", p.name()));
                if code == EXIT_PASS {
                    code = EXIT_FAIL;
                }
            }
            Err(e) => {
                r.error(format!("required property {}: {e}", p.name()));
                code = code.max(code_for(e));
            }
        }
    }
    r.line(format!(
        "result: {}",
        if code == EXIT_PASS { "pass" } else { "fail" }
    ));
    r.finish(code)
}

fn residual_map(report: &SynthesisReport) -> BTreeMap<String, f64> {
    let b = report.verification.blocks;
    [
        ("condition_a", report.sf.residual),
        ("condition_b", report.oi.residual),
        ("v_equation", report.vc.residual_v),
        ("w_equation", report.vc.residual_w),
        ("closed_loop", report.closed_loop_residual),
        ("x11", b.x11),
        ("x21", b.x21),
        ("x22", b.x22),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.relative()))
    .collect()
}

fn write_document(path: &Path, d: &ControllerDocument) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(d).map_err(|e| e.to_string())?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn synth(
    json_mode: bool,
    path: &Path,
    mode: SynthMode,
    out: Option<&Path>,
    tol: Option<f64>,
) -> Outcome {
    let tol = match tolerances(tol) {
        Ok(t) => t,
        Err(e) => return input_failure(json_mode, "synth", e),
    };
    let plant = match doc::load_plant(path).and_then(|p| p.plant.to_plant()) {
        Ok(p) => p,
        Err(e) => return input_failure(json_mode, "synth", e),
    };
    let mut r = Report::new(json_mode, "synth", Some(&tol));
    let (document, mut code) = match mode {
        SynthMode::Of => match synth_output_feedback_with(&plant, &tol) {
            Ok(report) => synth_of_summary(&mut r, &plant, &report, &tol),
            Err(e) => {
                r.set("stage", json!(e.stage.name()));
                r.error(format!(
                    "synthesis failed at stage {}: {}",
                    e.stage, e.message
                ));
                let code = match e.kind {
                    FailureKind::NoSolution => EXIT_FAIL,
                    FailureKind::Numerical => EXIT_NUMERICAL,
                    FailureKind::Assumption | FailureKind::Input => EXIT_INPUT,
                };
                return r.finish(code);
            }
        },
        SynthMode::Sf => match synth_state_feedback(&plant) {
            Ok(sf) => {
                let residual = sf.residual;
                let mut residuals = BTreeMap::new();
                residuals.insert("condition_a".to_string(), residual.relative());
                r.line("state feedback:");
                r.lines.extend(matrix_lines("K", &sf.k));
                r.lines.extend(matrix_lines("P", &sf.p));
                r.line(format!(
                    "condition (a) relative residual: {}",
                    sig6(residual.relative())
                ));
                if sf.partition.a22.nrows() == 0 {
                    r.line("T − S: empty (no anti-stable block, P = 0)");
                } else {
                    r.line(format!(
                        "T − S smallest eigenvalue: {}",
                        sig6(sf.gap.min_eig)
                    ));
                }
                r.set("K", json!(from_mat(&sf.k)));
                r.set("P", json!(from_mat(&sf.p)));
                r.set("residuals", json!(residuals));
                let mut code = if residual.within(tol.residual) {
                    EXIT_PASS
                } else {
                    r.error("condition (a) residual exceeds tolerance");
                    EXIT_NUMERICAL
                };
                match state_feedback_loop(&plant, &sf.k).and_then(|sys| {
                    let grid = FreqGrid::default_for(&sys, tol.freq)?;
                    ni_freq_check(&sys, &grid)
                }) {
                    Ok(c) => {
                        r.line(format!("closed loop NI on grid: {}", c.verdict()));
                        r.set("freq_verdict", json!(c.verdict()));
                        if !c.verdict() && code == EXIT_PASS {
                            r.error("state-feedback loop fails the NI frequency check");
                            code = EXIT_FAIL;
                        }
                    }
                    Err(e) => {
                        r.error(format!("frequency check: {e}"));
                        code = code.max(code_for(&e));
                    }
                }
                let d = ControllerDocument {
                    mode: Mode::StateFeedback,
                    controller: None,
                    state_feedback: Some(StateFeedbackMatrices { k: from_mat(&sf.k) }),
                    certificates: Certificates {
                        p: from_mat(&sf.p),
                        z: None,
                        v: None,
                        sigma: None,
                        rho_zp: None,
                        residuals,
                    },
                    tolerances: ToleranceDoc::from(&tol),
                    plant: PlantMatrices::from_plant(&plant),
                };
                (d, code)
            }
            Err(e) => {
                r.set("stage", json!("state-feedback"));
                r.error(format!("synthesis failed at stage state-feedback: {e}"));
                let code = match e {
                    Error::Certification(_) => EXIT_FAIL,
                    e => code_for(&e),
                };
                return r.finish(code);
            }
        },
    };
    if let Some(out) = out {
        match write_document(out, &document) {
            Ok(()) => {
                r.line(format!("wrote {}", out.display()));
                r.set("out", json!(out.display().to_string()));
            }
            Err(e) => {
                r.error(e);
                code = EXIT_NUMERICAL;
            }
        }
    }
    r.line(format!(
        "result: {}",
        if code == EXIT_PASS { "pass" } else { "fail" }
    ));
    r.finish(code)
}

fn synth_of_summary(
    r: &mut Report,
    plant: &UncertainPlant,
    report: &SynthesisReport,
    tol: &Tolerances,
) -> (ControllerDocument, i32) {
    let k = &report.controller;
    let residuals = residual_map(report);
    r.line("controller:");
    r.lines.extend(matrix_lines("Ak", &k.a_k));
    r.lines.extend(matrix_lines("Bk", &k.b_k));
    r.lines.extend(matrix_lines("Ck", &k.c_k));
    r.line(format!("rho(ZP): {}", sig6(report.rho_zp)));
    r.line(format!("output injection route: {:?}", report.oi.route));
    r.line("relative residuals:");
    for (name, v) in &residuals {
        r.line(format!("  {name}: {}", sig6(*v)));
    }
    r.line(format!(
        "Sigma smallest eigenvalue: {} (tolerance {})",
        sig6(report.verification.psd.min_eig),
        sig6(report.verification.psd.tol)
    ));
    r.line(format!(
        "closed loop Hurwitz: {} (spectral abscissa {})",
        report.hurwitz,
        sig6(report.abscissa)
    ));
    if let Some(s) = &report.sni {
        r.line(format!("closed loop SNI on grid: {}", s.verdict));
    }
    r.line(format!("closed loop NI on grid: {}", report.freq_verdict));
    r.set(
        "controller",
        json!({"Ak": from_mat(&k.a_k), "Bk": from_mat(&k.b_k), "Ck": from_mat(&k.c_k)}),
    );
    r.set("rho_zp", json!(report.rho_zp));
    r.set("residuals", json!(residuals));
    r.set("hurwitz", json!(report.hurwitz));
    r.set("sni_verdict", json!(report.sni.as_ref().map(|s| s.verdict)));
    r.set("freq_verdict", json!(report.freq_verdict));
    let code = if report.freq_verdict {
        EXIT_PASS
    } else {
        r.error("closed loop fails the NI frequency check");
        EXIT_FAIL
    };
    let d = ControllerDocument {
        mode: Mode::OutputFeedback,
        controller: Some(ControllerMatrices {
            a_k: from_mat(&k.a_k),
            b_k: from_mat(&k.b_k),
            c_k: from_mat(&k.c_k),
        }),
        state_feedback: None,
        certificates: Certificates {
            p: from_mat(&report.sf.p),
            z: Some(from_mat(&report.oi.z)),
            v: Some(from_mat(&report.vc.v)),
            sigma: Some(from_mat(&report.sigma)),
            rho_zp: Some(report.rho_zp),
            residuals,
        },
        tolerances: ToleranceDoc::from(tol),
        plant: PlantMatrices::from_plant(plant),
    };
    (d, code)
}

/// Stored residuals must be reproduced to this absolute difference.
const REPRODUCTION_TOL: f64 = 1e-10;

fn verify(
    json_mode: bool,
    plant_path: &Path,
    controller_path: &Path,
    tol: Option<f64>,
    sigma_path: Option<&Path>,
) -> Outcome {
    let tol = match tolerances(tol) {
        Ok(t) => t,
        Err(e) => return input_failure(json_mode, "verify", e),
    };
    let loaded = doc::load_plant(plant_path)
        .and_then(|p| Ok((p.plant.to_plant()?, doc::load_controller(controller_path)?)));
    let (plant, document) = match loaded {
        Ok(x) => x,
        Err(e) => return input_failure(json_mode, "verify", e),
    };
    let mut r = Report::new(json_mode, "verify", Some(&tol));
    match document.plant.to_plant() {
        Ok(p) if p == plant => {}
        Ok(_) => {
            r.error("the controller document was synthesized for a different plant");
            return r.finish(EXIT_INPUT);
        }
        Err(e) => {
            r.error(e.0);
            return r.finish(EXIT_INPUT);
        }
    }
    match verify_checks(&mut r, &plant, &document, &tol, sigma_path) {
        Ok(code) => {
            r.line(format!(
                "result: {}",
                if code == EXIT_PASS { "pass" } else { "fail" }
            ));
            r.finish(code)
        }
        Err((code, msg)) => {
            r.error(msg);
            r.finish(code)
        }
    }
}

type Failure = (i32, String);

fn input(e: impl std::fmt::Display) -> Failure {
    (EXIT_INPUT, e.to_string())
}

fn lib(e: Error) -> Failure {
    (code_for(&e), e.to_string())
}

fn verify_checks(
    r: &mut Report,
    plant: &UncertainPlant,
    d: &ControllerDocument,
    tol: &Tolerances,
    sigma_path: Option<&Path>,
) -> Result<i32, Failure> {
    let mut recomputed: BTreeMap<String, Residual> = BTreeMap::new();
    let p = to_mat(&d.certificates.p, "P").map_err(input)?;
    let (sys, psd, main) = match d.mode {
        Mode::OutputFeedback => {
            let k = d
                .controller
                .as_ref()
                .ok_or_else(|| input("output-feedback document has no \"controller\""))?
                .to_controller()
                .map_err(input)?;
            let cl = build_closed_loop(plant, &k).map_err(input)?;
            let sigma = match sigma_path {
                Some(path) => doc::load_matrix(path).map_err(input)?,
                None => to_mat(
                    d.certificates
                        .sigma
                        .as_ref()
                        .ok_or_else(|| input("document has no \"Sigma\"; pass --sigma"))?,
                    "Sigma",
                )
                .map_err(input)?,
            };
            let problem = AreProblem::closed_loop(&cl).map_err(lib)?;
            let residual = problem.residual(&sigma).map_err(input)?;
            let psd_tol = solution_psd_tol(&problem, &sigma, &residual, tol).map_err(lib)?;
            let v = verify_closed_loop(&cl, &sigma, psd_tol).map_err(lib)?;
            recomputed.insert("closed_loop".into(), v.residual);
            recomputed.insert("x11".into(), v.blocks.x11);
            recomputed.insert("x21".into(), v.blocks.x21);
            recomputed.insert("x22".into(), v.blocks.x22);
            if let Some(z) = &d.certificates.z {
                let z = to_mat(z, "Z").map_err(input)?;
                let n = plant.states();
                let l = -(Mat::identity(n, n) - &z * &p) * &k.b_k;
                let rb = AreProblem::condition_b(plant, &l).and_then(|q| q.residual(&z));
                recomputed.insert("condition_b".into(), rb.map_err(input)?);
            }
            let ra = AreProblem::condition_a(plant, &k.c_k).and_then(|q| q.residual(&p));
            recomputed.insert("condition_a".into(), ra.map_err(input)?);
            r.lines.extend(matrix_lines("Sigma", &sigma));
            (cl.transformed(), v.psd, "closed_loop")
        }
        Mode::StateFeedback => {
            let k = d
                .state_feedback
                .as_ref()
                .ok_or_else(|| input("state-feedback document has no \"state_feedback\""))?;
            let k = to_mat(&k.k, "K").map_err(input)?;
            let problem = AreProblem::condition_a(plant, &k).map_err(input)?;
            let residual = problem.residual(&p).map_err(input)?;
            let psd_tol = solution_psd_tol(&problem, &p, &residual, tol).map_err(lib)?;
            recomputed.insert("condition_a".into(), residual);
            let psd = psd_margin(&p, psd_tol).map_err(lib)?;
            (
                state_feedback_loop(plant, &k).map_err(input)?,
                psd,
                "condition_a",
            )
        }
    };

    let mut code = EXIT_PASS;
    let main_residual = recomputed[main];
    r.line("recomputed relative residuals:");
    for (name, v) in &recomputed {
        r.line(format!("  {name}: {}", sig6(v.relative())));
    }
    r.set(
        "residuals",
        json!(recomputed
            .iter()
            .map(|(k, v)| (k.clone(), v.relative()))
            .collect::<BTreeMap<_, _>>()),
    );
    if !main_residual.within(tol.residual) {
        r.error(format!(
            "{main} relative residual {} exceeds {}",
            sig6(main_residual.relative()),
            sig6(tol.residual)
        ));
        code = EXIT_FAIL;
    }
    r.line(format!(
        "certificate smallest eigenvalue: {} (tolerance {}), PSD {}",
        sig6(psd.min_eig),
        sig6(psd.tol),
        psd.is_psd
    ));
    r.set(
        "psd",
        json!({"min_eig": psd.min_eig, "tol": psd.tol, "is_psd": psd.is_psd}),
    );
    if !psd.is_psd {
        r.error("certificate is not positive semidefinite");
        code = EXIT_FAIL;
    }

    if sigma_path.is_none() {
        let mut reproduced = true;
        for (name, stored) in &d.certificates.residuals {
            if let Some(v) = recomputed.get(name) {
                if (v.relative() - stored).abs() > REPRODUCTION_TOL {
                    reproduced = false;
                    r.error(format!(
                        "stored residual {name} = {stored:e} not reproduced (recomputed {:e})",
                        v.relative()
                    ));
                }
            }
        }
        r.line(format!("stored residuals reproduced: {reproduced}"));
        r.set("reproduced", json!(reproduced));
        if !reproduced {
            code = EXIT_FAIL;
        }
    }

    let grid = FreqGrid::default_for(&sys, tol.freq).map_err(lib)?;
    let c = ni_freq_check(&sys, &grid).map_err(lib)?;
    r.line(format!(
        "closed loop NI on grid: {} (worst margin {})",
        c.verdict(),
        sig6(c.worst_margin())
    ));
    r.set("freq_verdict", json!(c.verdict()));
    if !c.verdict() {
        r.error("closed loop fails the NI frequency check");
        code = EXIT_FAIL;
    }
    Ok(code)
}

/// Full-precision decimal for CSV cells.
fn cell(x: f64) -> String {
    format!("{x:.16e}")
}

fn freq(
    json_mode: bool,
    path: &Path,
    grid_args: &GridArgs,
    csv: Option<&Path>,
    tol: Option<f64>,
) -> Outcome {
    // the sweep has no residual to test, so --tol sets the margin tolerance
    let tol = match tolerances(None).and_then(|t| match tol {
        Some(v) if v.is_finite() && v > 0.0 => Ok(Tolerances { freq: v, ..t }),
        Some(v) => Err(InputError(format!(
            "--tol must be a positive number, got {v}"
        ))),
        None => Ok(t),
    }) {
        Ok(t) => t,
        Err(e) => return input_failure(json_mode, "freq", e),
    };
    let sys = match doc::load(path).and_then(|d| target_system(&d)) {
        Ok((s, _)) => s,
        Err(e) => return input_failure(json_mode, "freq", e),
    };
    let mut r = Report::new(json_mode, "freq", Some(&tol));
    if !sys.is_square() {
        r.error(format!(
            "the NI margin needs a square system, got {}x{}",
            sys.outputs(),
            sys.inputs()
        ));
        return r.finish(EXIT_INPUT);
    }
    let grid = match grid_args.grid(tol.freq) {
        Ok(g) => g,
        Err(e) => {
            r.error(e.to_string());
            return r.finish(EXIT_INPUT);
        }
    };
    let ev = match FrequencyEvaluator::new(&sys) {
        Ok(ev) => ev,
        Err(e) => {
            r.error(e.to_string());
            return r.finish(code_for(&e));
        }
    };
    let (p, m) = (sys.outputs(), sys.inputs());
    let mut header = vec!["omega".to_string()];
    for part in ["re", "im"] {
        for i in 1..=p {
            for j in 1..=m {
                header.push(format!("{part}_{i}{j}"));
            }
        }
    }
    header.push("ni_margin".into());
    let mut text = header.join(",");
    text.push('\n');
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut worst = f64::INFINITY;
    for &w in &grid.omegas {
        let g = if ev.pole_distance(Complex64::new(0.0, w)) <= GRID_POLE_GAP {
            None
        } else {
            match ev.at_omega(w) {
                Ok(g) => Some(g),
                Err(Error::PoleProximity { .. }) => None,
                Err(e) => {
                    r.error(e.to_string());
                    return r.finish(code_for(&e));
                }
            }
        };
        let Some(g) = g else {
            skipped.push(w);
            continue;
        };
        let margin = ni_margin(&g);
        worst = worst.min(margin);
        let mut cells = vec![cell(w)];
        cells.extend(g.transpose().iter().map(|z| cell(z.re)));
        cells.extend(g.transpose().iter().map(|z| cell(z.im)));
        cells.push(cell(margin));
        let _ = writeln!(text, "{}", cells.join(","));
        rows.push(json!({
            "omega": w,
            "re": from_mat(&g.map(|z| z.re)),
            "im": from_mat(&g.map(|z| z.im)),
            "ni_margin": margin,
        }));
    }
    r.set("rows", json!(rows.len()));
    r.set("skipped", json!(skipped));
    r.set(
        "worst_margin",
        json!(if rows.is_empty() { None } else { Some(worst) }),
    );
    let mut code = if worst < -tol.freq {
        EXIT_FAIL
    } else {
        EXIT_PASS
    };
    match csv {
        Some(out) => match std::fs::write(out, &text) {
            Ok(()) => {
                r.line(format!("wrote {} rows to {}", rows.len(), out.display()));
                r.set("csv", json!(out.display().to_string()));
            }
            Err(e) => {
                r.error(format!("cannot write {}: {e}", out.display()));
                code = EXIT_NUMERICAL;
            }
        },
        None if !json_mode => {
            r.lines.clear();
            r.lines.extend(text.lines().map(String::from));
        }
        None => r.set("data", json!(rows)),
    }
    if csv.is_some() || json_mode {
        r.line(format!(
            "{} points evaluated, {} skipped, worst NI margin {}",
            rows.len(),
            skipped.len(),
            sig6(worst)
        ));
    }
    let mut out = r.finish(code);
    let notes: String = skipped
        .iter()
        .map(|w| {
            format!(
                "note: skipped omega = {} (within {GRID_POLE_GAP:e} of a pole)\n",
                cell(*w)
            )
        })
        .collect();
    out.stderr = notes + &out.stderr;
    out
}

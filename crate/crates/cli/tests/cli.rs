use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn ni_synth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ni-synth"))
        .args(args)
        .env_remove("NI_SYNTH_TOL")
        .output()
        .expect("binary runs")
}

fn text(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("json report")
}

fn synth_ex1(dir: &Path) -> PathBuf {
    let out = dir.join("c.json");
    let o = ni_synth(&["synth", text(&data("ex1.json")), "--out", text(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

#[test]
fn analyze_ex1_assumptions_hold() {
    let o = ni_synth(&["--json", "analyze", text(&data("ex1.json"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&o);
    assert_eq!(r["assumptions"]["all_hold"], true);
    assert_eq!(r["tolerances"]["residual"], 1e-8);
}

#[test]
fn analyze_missing_field_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: Value =
        serde_json::from_str(&std::fs::read_to_string(data("ex1.json")).unwrap()).unwrap();
    doc["plant"].as_object_mut().unwrap().remove("B2");
    let path = dir.path().join("p.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let o = ni_synth(&["analyze", text(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("B2"), "{}", stderr(&o));
}

#[test]
fn analyze_zero_c1_violates_assumptions() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: Value =
        serde_json::from_str(&std::fs::read_to_string(data("ex1.json")).unwrap()).unwrap();
    doc["plant"]["C1"] = serde_json::json!([[0, 0, 0]]);
    let path = dir.path().join("p.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let o = ni_synth(&["analyze", text(&path)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("A2") && err.contains("A4"), "{err}");
}

#[test]
fn analyze_highpass_is_not_ni() {
    let o = ni_synth(&[
        "--json",
        "analyze",
        text(&data("highpass.json")),
        "--require",
        "ni-cert",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let r = json(&o);
    assert_eq!(r["ni"]["verdict"], false);
    assert!(r["ni"]["worst_margin"].as_f64().unwrap() < -0.5);
    assert_eq!(r["ni_cert"]["valid"], false);
}

#[test]
fn synth_ex1_writes_the_published_controller() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_ex1(dir.path());
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    let k = &doc["controller"];
    let expected = serde_json::json!({
        "Ak": [[-1.0, -2.0, 0.0], [-1.0, -5.0, 1.0], [1.0, -1.0, -1.0]],
        "Bk": [[1.0], [2.0], [1.0]],
        "Ck": [[1.0, 0.0, 0.0]],
    });
    for key in ["Ak", "Bk", "Ck"] {
        let got = k[key].as_array().unwrap();
        let want = expected[key].as_array().unwrap();
        for (g, w) in got.iter().zip(want) {
            for (a, b) in g.as_array().unwrap().iter().zip(w.as_array().unwrap()) {
                assert!(
                    (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() <= 1e-10,
                    "{key}"
                );
            }
        }
    }
    assert_eq!(doc["certificates"]["rho_zp"], 0.0);
    assert_eq!(doc["mode"], "output-feedback");
}

#[test]
fn synth_state_feedback_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sf.json");
    let o = ni_synth(&[
        "synth",
        text(&data("ex1.json")),
        "--mode",
        "sf",
        "--out",
        text(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(
        doc["state_feedback"]["K"],
        serde_json::json!([[1.0, 0.0, 0.0]])
    );
    assert_eq!(
        doc["certificates"]["P"],
        serde_json::json!([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    );
    let o = ni_synth(&["verify", text(&data("ex1.json")), text(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn synth_unsatisfiable_reports_stage() {
    let o = ni_synth(&["--json", "synth", text(&data("unsatisfiable.json"))]);
    assert_eq!(o.status.code(), Some(1));
    let r = json(&o);
    assert_eq!(r["stage"], "state-feedback");
    assert!(r["errors"][0].as_str().unwrap().contains("T − S"));
}

#[test]
fn verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_ex1(dir.path());
    let o = ni_synth(&["--json", "verify", text(&data("ex1.json")), text(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&o);
    assert_eq!(r["reproduced"], true);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for (name, stored) in doc["certificates"]["residuals"].as_object().unwrap() {
        if let Some(v) = r["residuals"].get(name) {
            assert!(
                (v.as_f64().unwrap() - stored.as_f64().unwrap()).abs() <= 1e-10,
                "{name}"
            );
        }
    }
}

#[test]
fn verify_perturbed_controller_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_ex1(dir.path());
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let a = doc["controller"]["Ak"][0][0].as_f64().unwrap();
    doc["controller"]["Ak"][0][0] = (a + 0.5).into();
    std::fs::write(&out, doc.to_string()).unwrap();
    let o = ni_synth(&["verify", text(&data("ex1.json")), text(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("closed_loop relative residual"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn verify_printed_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_ex1(dir.path());
    let sigma = data("ex1_printed_sigma.json");
    let strict = ni_synth(&[
        "--json",
        "verify",
        text(&data("ex1.json")),
        text(&out),
        "--sigma",
        text(&sigma),
    ]);
    assert_eq!(strict.status.code(), Some(1));
    let residual = json(&strict)["residuals"]["closed_loop"].as_f64().unwrap();
    assert!(residual <= 5e-3, "{residual}");
    let loose = ni_synth(&[
        "verify",
        text(&data("ex1.json")),
        text(&out),
        "--sigma",
        text(&sigma),
        "--tol",
        "1e-2",
    ]);
    assert_eq!(loose.status.code(), Some(0), "{}", stderr(&loose));
}

#[test]
fn verify_other_plant_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_ex1(dir.path());
    let o = ni_synth(&["verify", text(&data("unsatisfiable.json")), text(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn freq_lowpass_single_row() {
    let o = ni_synth(&[
        "freq",
        text(&data("lowpass.json")),
        "--omega-min",
        "1",
        "--omega-max",
        "1",
        "--points",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "omega,re_11,im_11,ni_margin");
    assert_eq!(lines.len(), 2);
    let cells: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(cells, vec![1.0, 0.5, -0.5, 1.0]);
    // 17 significant digits
    assert_eq!(lines[1].split(',').next().unwrap(), "1.0000000000000000e0");
}

#[test]
fn freq_closed_loop_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_ex1(dir.path());
    let csv = dir.path().join("f.csv");
    let o = ni_synth(&["freq", text(&out), "--csv", text(&csv), "--points", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let body = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = body.lines().skip(1).collect();
    assert_eq!(rows.len(), 50);
    for row in rows {
        let margin: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(margin >= -1e-8);
    }
}

#[test]
fn freq_skips_poles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("osc.json");
    std::fs::write(
        &path,
        r#"{"system": {"A": [[0, 1], [-1, 0]], "B": [[0], [1]], "C": [[1, 0]]}}"#,
    )
    .unwrap();
    let o = ni_synth(&[
        "freq",
        text(&path),
        "--omega-min",
        "0.1",
        "--omega-max",
        "10",
        "--points",
        "3",
    ]);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 3, "{out}");
    assert!(stderr(&o).contains("skipped omega"));
}

#[test]
fn freq_unwritable_output() {
    let o = ni_synth(&[
        "freq",
        text(&data("lowpass.json")),
        "--csv",
        "/nonexistent-dir/out.csv",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn environment_tolerance() {
    let o = Command::new(env!("CARGO_BIN_EXE_ni-synth"))
        .args(["--json", "analyze", text(&data("ex1.json"))])
        .env("NI_SYNTH_TOL", "1e-6")
        .output()
        .unwrap();
    assert_eq!(json(&o)["tolerances"]["residual"], 1e-6);
    let o = Command::new(env!("CARGO_BIN_EXE_ni-synth"))
        .args(["analyze", text(&data("ex1.json")), "--tol", "1e-4"])
        .env("NI_SYNTH_TOL", "1e-6")
        .output()
        .unwrap();
    assert!(stdout(&o).contains("residual 0.000100000"));
    let o = Command::new(env!("CARGO_BIN_EXE_ni-synth"))
        .args(["analyze", text(&data("ex1.json"))])
        .env("NI_SYNTH_TOL", "-1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn machine_output_is_deterministic() {
    let a = ni_synth(&["--json", "synth", text(&data("ex1.json"))]);
    let b = ni_synth(&["--json", "synth", text(&data("ex1.json"))]);
    assert_eq!(a.stdout, b.stdout);
}

//! JSON documents: plants, plain systems and synthesized controllers.
//! Matrices are row-major arrays of arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ni_synth::ss::{DynamicController, StateSpace, UncertainPlant};
use ni_synth::{Mat, Tolerances};
use serde::{Deserialize, Serialize};

pub type Rows = Vec<Vec<f64>>;

/// Unreadable or malformed input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<ni_synth::Error> for InputError {
    fn from(e: ni_synth::Error) -> Self {
        InputError(e.to_string())
    }
}

pub fn to_mat(rows: &Rows, name: &str) -> Result<Mat, InputError> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(InputError(format!(
            "matrix \"{name}\" is not rectangular: row {} has {} entries, row 1 has {cols}",
            i + 1,
            rows[i].len()
        )));
    }
    Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn from_mat(m: &Mat) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantMatrices {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B1")]
    pub b1: Rows,
    #[serde(rename = "B2")]
    pub b2: Rows,
    #[serde(rename = "C1")]
    pub c1: Rows,
    #[serde(rename = "C2")]
    pub c2: Rows,
    #[serde(rename = "D21")]
    pub d21: Rows,
}

impl PlantMatrices {
    pub fn from_plant(p: &UncertainPlant) -> Self {
        Self {
            a: from_mat(&p.a),
            b1: from_mat(&p.b1),
            b2: from_mat(&p.b2),
            c1: from_mat(&p.c1),
            c2: from_mat(&p.c2),
            d21: from_mat(&p.d21),
        }
    }

    pub fn to_plant(&self) -> Result<UncertainPlant, InputError> {
        Ok(UncertainPlant::new(
            to_mat(&self.a, "A")?,
            to_mat(&self.b1, "B1")?,
            to_mat(&self.b2, "B2")?,
            to_mat(&self.c1, "C1")?,
            to_mat(&self.c2, "C2")?,
            to_mat(&self.d21, "D21")?,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemMatrices {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "C")]
    pub c: Rows,
    /// Zero when omitted.
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Rows>,
}

impl SystemMatrices {
    pub fn to_system(&self) -> Result<StateSpace, InputError> {
        let a = to_mat(&self.a, "A")?;
        let b = to_mat(&self.b, "B")?;
        let c = to_mat(&self.c, "C")?;
        let d = match &self.d {
            Some(d) => to_mat(d, "D")?,
            None => Mat::zeros(c.nrows(), b.ncols()),
        };
        Ok(StateSpace::new(a, b, c, d)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantDocument {
    pub plant: PlantMatrices,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<SystemMatrices>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDocument {
    pub system: SystemMatrices,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerMatrices {
    #[serde(rename = "Ak")]
    pub a_k: Rows,
    #[serde(rename = "Bk")]
    pub b_k: Rows,
    #[serde(rename = "Ck")]
    pub c_k: Rows,
}

impl ControllerMatrices {
    pub fn to_controller(&self) -> Result<DynamicController, InputError> {
        Ok(DynamicController::new(
            to_mat(&self.a_k, "Ak")?,
            to_mat(&self.b_k, "Bk")?,
            to_mat(&self.c_k, "Ck")?,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFeedbackMatrices {
    #[serde(rename = "K")]
    pub k: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificates {
    #[serde(rename = "P")]
    pub p: Rows,
    #[serde(rename = "Z", default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Rows>,
    #[serde(rename = "V", default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Rows>,
    #[serde(rename = "Sigma", default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_zp: Option<f64>,
    /// Relative residuals by equation name.
    pub residuals: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceDoc {
    pub residual: f64,
    pub psd: f64,
    pub freq: f64,
}

impl From<&Tolerances> for ToleranceDoc {
    fn from(t: &Tolerances) -> Self {
        Self {
            residual: t.residual,
            psd: t.psd,
            freq: t.freq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OutputFeedback,
    StateFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerDocument {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerMatrices>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_feedback: Option<StateFeedbackMatrices>,
    pub certificates: Certificates,
    pub tolerances: ToleranceDoc,
    /// The plant the controller was synthesized for.
    pub plant: PlantMatrices,
}

pub enum Document {
    Plant(PlantDocument),
    System(SystemDocument),
    Controller(ControllerDocument),
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T, InputError> {
    serde_json::from_str(text).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

pub fn read(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))
}

/// Reads any of the three document kinds, told apart by their top-level key.
pub fn load(path: &Path) -> Result<Document, InputError> {
    let text = read(path)?;
    let value: serde_json::Value = parse(&text, path)?;
    let has = |k: &str| value.get(k).is_some();
    if has("certificates") || has("controller") || has("state_feedback") {
        Ok(Document::Controller(parse(&text, path)?))
    } else if has("plant") {
        Ok(Document::Plant(parse(&text, path)?))
    } else if has("system") {
        Ok(Document::System(parse(&text, path)?))
    } else {
        Err(InputError(format!(
            "{}: expected a top-level \"plant\", \"system\" or \"controller\" object",
            path.display()
        )))
    }
}

pub fn load_plant(path: &Path) -> Result<PlantDocument, InputError> {
    match load(path)? {
        Document::Plant(p) => Ok(p),
        _ => Err(InputError(format!(
            "{}: not a plant document",
            path.display()
        ))),
    }
}

pub fn load_controller(path: &Path) -> Result<ControllerDocument, InputError> {
    match load(path)? {
        Document::Controller(c) => Ok(c),
        _ => Err(InputError(format!(
            "{}: not a controller document",
            path.display()
        ))),
    }
}

/// A bare matrix, or an object holding it under `"Sigma"`.
pub fn load_matrix(path: &Path) -> Result<Mat, InputError> {
    let text = read(path)?;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Wrapped {
        Bare(Rows),
        Named {
            #[serde(rename = "Sigma")]
            sigma: Rows,
        },
    }
    let rows = match parse::<Wrapped>(&text, path)? {
        Wrapped::Bare(r) | Wrapped::Named { sigma: r } => r,
    };
    to_mat(&rows, "Sigma")
}

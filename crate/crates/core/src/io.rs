//! Artifact files: structured-text (TOML) descriptions of plants,
//! controllers, and certificates, plus CSV tables for datasets, training
//! histories, and simulated trajectories.
//!
//! Every floating-point value is written in shortest round-trip decimal
//! form, so saving and re-loading an artifact reproduces each number
//! bit-exactly, and re-saving a loaded artifact reproduces the file
//! byte-for-byte. Matrices are stored row-major with explicit dimensions;
//! nonlinearities are stored by registry name (`tanh`, `relu`,
//! `leaky_relu` with a slope parameter, `v_minus_sin`) together with their
//! original sector and a flag for normalized (loop-transformed)
//! coordinates. Certificate files record the SHA-256 of the plant and
//! controller files they certify, so a stale pairing is detectable.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{Activation, Nonlinearity, SectorSpec};
use crate::convex::ThetaHat;
use crate::error::{Error, Result};
use crate::plant::{ImplicitNnPlant, PlantLti, PlantModel, PlantSector};
use crate::ren::TransformedRenParams;
use crate::stability::StabilityCertificate;
use crate::sysid::{EpochRecord, SysidDataset, SysidSample};
use crate::training::TrainRecord;

/// A dense matrix in row-major order with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> MatrixData {
        MatrixData {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Parse(format!(
                "matrix declared {}x{} but carries {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// An elementwise nonlinearity by registry name, with its sector in
/// original coordinates and a flag for the normalized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityData {
    pub activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub normalized: bool,
}

impl NonlinearityData {
    pub fn from_nonlinearity(nl: &Nonlinearity) -> NonlinearityData {
        let (activation, param) = match nl.activation() {
            Activation::Tanh => ("tanh", None),
            Activation::Relu => ("relu", None),
            Activation::LeakyRelu(a) => ("leaky_relu", Some(a)),
            Activation::VMinusSin => ("v_minus_sin", None),
        };
        let sector = nl.original_sector();
        NonlinearityData {
            activation: activation.to_string(),
            param,
            alpha: sector.alpha.as_slice().to_vec(),
            beta: sector.beta.as_slice().to_vec(),
            normalized: nl.is_normalized(),
        }
    }

    pub fn to_nonlinearity(&self) -> Result<Nonlinearity> {
        let act = match (self.activation.as_str(), self.param) {
            ("tanh", None) => Activation::Tanh,
            ("relu", None) => Activation::Relu,
            ("leaky_relu", Some(a)) => Activation::LeakyRelu(a),
            ("v_minus_sin", None) => Activation::VMinusSin,
            ("leaky_relu", None) => {
                return Err(Error::Parse(
                    "leaky_relu needs a slope parameter".into(),
                ))
            }
            (other, _) => {
                return Err(Error::Parse(format!(
                    "unknown activation '{other}' \
                     (have: tanh, relu, leaky_relu, v_minus_sin)"
                )))
            }
        };
        let sector = SectorSpec::new(
            DVector::from_column_slice(&self.alpha),
            DVector::from_column_slice(&self.beta),
        )?;
        let nl = Nonlinearity::new(act, sector)?;
        if self.normalized {
            nl.normalized()
        } else {
            Ok(nl)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn to_toml<T: Serialize>(value: &T, what: &str) -> Result<String> {
    toml::to_string_pretty(value)
        .map_err(|e| Error::Parse(format!("cannot serialize {what}: {e}")))
}

fn from_toml<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse(format!("malformed {what} file: {e}")))
}

/// On-disk plant description covering all three plant classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantFile {
    /// One of `lti`, `sector`, `implicit_nn`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<NonlinearityData>,
    /// State map (all kinds).
    pub a: MatrixData,
    /// Input map: B_G for LTI plants, B_G2 / B2 otherwise.
    pub b_input: MatrixData,
    /// Output map: C_G for LTI plants, C_G1 / C1 otherwise.
    pub c_output: MatrixData,
    /// Nonlinearity input map C_G2 / C2 (absent for LTI plants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_nl: Option<MatrixData>,
    /// Nonlinearity output map B_G1 / B1 (absent for LTI plants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_nl: Option<MatrixData>,
    /// Nonlinearity feedthrough D_G3 / D3 (absent for LTI plants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_nl: Option<MatrixData>,
}

impl PlantFile {
    pub fn from_model(model: &PlantModel) -> PlantFile {
        match model {
            PlantModel::Lti(p) => PlantFile {
                kind: "lti".into(),
                nonlinearity: None,
                a: MatrixData::from_matrix(&p.a_g),
                b_input: MatrixData::from_matrix(&p.b_g),
                c_output: MatrixData::from_matrix(&p.c_g),
                c_nl: None,
                b_nl: None,
                d_nl: None,
            },
            PlantModel::Sector(p) => PlantFile {
                kind: "sector".into(),
                nonlinearity: Some(NonlinearityData::from_nonlinearity(&p.delta)),
                a: MatrixData::from_matrix(&p.a_g),
                b_input: MatrixData::from_matrix(&p.b_g2),
                c_output: MatrixData::from_matrix(&p.c_g1),
                c_nl: Some(MatrixData::from_matrix(&p.c_g2)),
                b_nl: Some(MatrixData::from_matrix(&p.b_g1)),
                d_nl: Some(MatrixData::from_matrix(&p.d_g3)),
            },
            PlantModel::ImplicitNn(p) => PlantFile {
                kind: "implicit_nn".into(),
                nonlinearity: Some(NonlinearityData::from_nonlinearity(&p.delta)),
                a: MatrixData::from_matrix(&p.a),
                b_input: MatrixData::from_matrix(&p.b2),
                c_output: MatrixData::from_matrix(&p.c1),
                c_nl: Some(MatrixData::from_matrix(&p.c2)),
                b_nl: Some(MatrixData::from_matrix(&p.b1)),
                d_nl: Some(MatrixData::from_matrix(&p.d3)),
            },
        }
    }

    pub fn to_model(&self) -> Result<PlantModel> {
        let nl_parts = || -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Nonlinearity)> {
            let missing = |what: &str| {
                Error::Parse(format!("{} plant file is missing `{what}`", self.kind))
            };
            Ok((
                self.b_nl.as_ref().ok_or_else(|| missing("b_nl"))?.to_matrix()?,
                self.c_nl.as_ref().ok_or_else(|| missing("c_nl"))?.to_matrix()?,
                self.d_nl.as_ref().ok_or_else(|| missing("d_nl"))?.to_matrix()?,
                self.nonlinearity
                    .as_ref()
                    .ok_or_else(|| missing("nonlinearity"))?
                    .to_nonlinearity()?,
            ))
        };
        match self.kind.as_str() {
            "lti" => Ok(PlantModel::Lti(PlantLti::new(
                self.a.to_matrix()?,
                self.b_input.to_matrix()?,
                self.c_output.to_matrix()?,
            )?)),
            "sector" => {
                let (b1, c2, d3, delta) = nl_parts()?;
                Ok(PlantModel::Sector(PlantSector::new(
                    self.a.to_matrix()?,
                    b1,
                    self.b_input.to_matrix()?,
                    self.c_output.to_matrix()?,
                    c2,
                    d3,
                    delta,
                )?))
            }
            "implicit_nn" => {
                let (b1, c2, d3, delta) = nl_parts()?;
                Ok(PlantModel::ImplicitNn(ImplicitNnPlant::new(
                    self.a.to_matrix()?,
                    b1,
                    self.b_input.to_matrix()?,
                    self.c_output.to_matrix()?,
                    c2,
                    d3,
                    delta,
                )?))
            }
            other => Err(Error::Parse(format!(
                "unknown plant kind '{other}' (have: lti, sector, implicit_nn)"
            ))),
        }
    }
}

pub fn save_plant(path: &Path, model: &PlantModel) -> Result<()> {
    write_text(path, &to_toml(&PlantFile::from_model(model), "plant")?)
}

pub fn load_plant(path: &Path) -> Result<PlantModel> {
    from_toml::<PlantFile>(&read_text(path)?, "plant")?.to_model()
}

/// On-disk controller description: the nine transformed weight matrices
/// and the activation behind the normalized nonlinearity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerFile {
    pub phi: NonlinearityData,
    pub a_k: MatrixData,
    pub b_k1: MatrixData,
    pub b_k2: MatrixData,
    pub c_k1: MatrixData,
    pub d_k1: MatrixData,
    pub d_k2: MatrixData,
    pub c_k2: MatrixData,
    pub d_k3: MatrixData,
    pub d_k4: MatrixData,
}

impl ControllerFile {
    pub fn from_controller(ctrl: &TransformedRenParams) -> ControllerFile {
        ControllerFile {
            phi: NonlinearityData::from_nonlinearity(&ctrl.phi),
            a_k: MatrixData::from_matrix(&ctrl.a_k),
            b_k1: MatrixData::from_matrix(&ctrl.b_k1),
            b_k2: MatrixData::from_matrix(&ctrl.b_k2),
            c_k1: MatrixData::from_matrix(&ctrl.c_k1),
            d_k1: MatrixData::from_matrix(&ctrl.d_k1),
            d_k2: MatrixData::from_matrix(&ctrl.d_k2),
            c_k2: MatrixData::from_matrix(&ctrl.c_k2),
            d_k3: MatrixData::from_matrix(&ctrl.d_k3),
            d_k4: MatrixData::from_matrix(&ctrl.d_k4),
        }
    }

    pub fn to_controller(&self) -> Result<TransformedRenParams> {
        TransformedRenParams::new(
            self.a_k.to_matrix()?,
            self.b_k1.to_matrix()?,
            self.b_k2.to_matrix()?,
            self.c_k1.to_matrix()?,
            self.d_k1.to_matrix()?,
            self.d_k2.to_matrix()?,
            self.c_k2.to_matrix()?,
            self.d_k3.to_matrix()?,
            self.d_k4.to_matrix()?,
            self.phi.to_nonlinearity()?,
        )
    }
}

pub fn save_controller(path: &Path, ctrl: &TransformedRenParams) -> Result<()> {
    write_text(path, &to_toml(&ControllerFile::from_controller(ctrl), "controller")?)
}

pub fn load_controller(path: &Path) -> Result<TransformedRenParams> {
    from_toml::<ControllerFile>(&read_text(path)?, "controller")?.to_controller()
}

/// A certificate together with the identities of the files it certifies.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateArtifact {
    pub certificate: StabilityCertificate,
    /// SHA-256 of the certified plant file, when recorded.
    pub plant_hash: Option<String>,
    /// SHA-256 of the certified controller file, when recorded.
    pub controller_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CertificateFile {
    rho: f64,
    margin: f64,
    lambda_delta: Vec<f64>,
    lambda_phi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plant_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    controller_hash: Option<String>,
    p: MatrixData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u: Option<MatrixData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<MatrixData>,
}

pub fn save_certificate(path: &Path, artifact: &CertificateArtifact) -> Result<()> {
    let cert = &artifact.certificate;
    let file = CertificateFile {
        rho: cert.rho,
        margin: cert.margin,
        lambda_delta: cert.lambda_delta.as_slice().to_vec(),
        lambda_phi: cert.lambda_phi.as_slice().to_vec(),
        plant_hash: artifact.plant_hash.clone(),
        controller_hash: artifact.controller_hash.clone(),
        p: MatrixData::from_matrix(&cert.p_mat),
        u: cert.u_mat.as_ref().map(MatrixData::from_matrix),
        v: cert.v_mat.as_ref().map(MatrixData::from_matrix),
    };
    write_text(path, &to_toml(&file, "certificate")?)
}

pub fn load_certificate(path: &Path) -> Result<CertificateArtifact> {
    let file: CertificateFile = from_toml(&read_text(path)?, "certificate")?;
    Ok(CertificateArtifact {
        certificate: StabilityCertificate {
            p_mat: file.p.to_matrix()?,
            lambda_delta: DVector::from_column_slice(&file.lambda_delta),
            lambda_phi: DVector::from_column_slice(&file.lambda_phi),
            rho: file.rho,
            margin: file.margin,
            u_mat: file.u.as_ref().map(MatrixData::to_matrix).transpose()?,
            v_mat: file.v.as_ref().map(MatrixData::to_matrix).transpose()?,
        },
        plant_hash: file.plant_hash,
        controller_hash: file.controller_hash,
    })
}

/// On-disk form of the lifted synthesis parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaHatFile {
    pub x: MatrixData,
    pub y: MatrixData,
    pub n: MatrixData,
    pub lambda_phi: Vec<f64>,
    pub d_k1_t: MatrixData,
    pub n_hat_12: MatrixData,
    pub n_hat_21: MatrixData,
    pub d_hat_3: MatrixData,
    pub d_hat_4: MatrixData,
}

pub fn save_theta_hat(path: &Path, th: &ThetaHat) -> Result<()> {
    let file = ThetaHatFile {
        x: MatrixData::from_matrix(&th.x),
        y: MatrixData::from_matrix(&th.y),
        n: MatrixData::from_matrix(&th.n),
        lambda_phi: th.lambda_phi.as_slice().to_vec(),
        d_k1_t: MatrixData::from_matrix(&th.d_k1_t),
        n_hat_12: MatrixData::from_matrix(&th.n_hat_12),
        n_hat_21: MatrixData::from_matrix(&th.n_hat_21),
        d_hat_3: MatrixData::from_matrix(&th.d_hat_3),
        d_hat_4: MatrixData::from_matrix(&th.d_hat_4),
    };
    write_text(path, &to_toml(&file, "lifted parameters")?)
}

pub fn load_theta_hat(path: &Path) -> Result<ThetaHat> {
    let file: ThetaHatFile = from_toml(&read_text(path)?, "lifted parameters")?;
    Ok(ThetaHat {
        x: file.x.to_matrix()?,
        y: file.y.to_matrix()?,
        n: file.n.to_matrix()?,
        lambda_phi: DVector::from_column_slice(&file.lambda_phi),
        d_k1_t: file.d_k1_t.to_matrix()?,
        n_hat_12: file.n_hat_12.to_matrix()?,
        n_hat_21: file.n_hat_21.to_matrix()?,
        d_hat_3: file.d_hat_3.to_matrix()?,
        d_hat_4: file.d_hat_4.to_matrix()?,
    })
}

/// SHA-256 of a file's bytes, lowercase hex.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn csv_parse_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

fn parse_field(path: &Path, row: usize, field: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| {
        Error::Parse(format!(
            "{}: row {row}: '{field}' is not a number ({e})",
            path.display()
        ))
    })
}

/// Write a training history as CSV with one row per iteration.
pub fn write_history_csv(path: &Path, history: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration",
        "mean_reward",
        "lmi_margin",
        "grad_norm",
        "projection_distance",
        "wall_time",
    ])
    .map_err(|e| csv_parse_error(path, e))?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            r.mean_reward.to_string(),
            r.lmi_margin.to_string(),
            r.grad_norm.to_string(),
            r.projection_distance.to_string(),
            r.wall_time.to_string(),
        ])
        .map_err(|e| csv_parse_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_parse_error(path, e))?;
        if rec.len() != 6 {
            return Err(Error::Parse(format!(
                "{}: row {i} has {} fields, expected 6",
                path.display(),
                rec.len()
            )));
        }
        out.push(TrainRecord {
            iteration: parse_field(path, i, &rec[0])? as usize,
            mean_reward: parse_field(path, i, &rec[1])?,
            lmi_margin: parse_field(path, i, &rec[2])?,
            grad_norm: parse_field(path, i, &rec[3])?,
            projection_distance: parse_field(path, i, &rec[4])?,
            wall_time: parse_field(path, i, &rec[5])?,
        });
    }
    Ok(out)
}

/// Write an identification history as CSV with one row per epoch.
pub fn write_sysid_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mse", "d3_norm", "rescaled"])
        .map_err(|e| csv_parse_error(path, e))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.mse.to_string(),
            r.d3_norm.to_string(),
            r.rescaled.to_string(),
        ])
        .map_err(|e| csv_parse_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sysid_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_parse_error(path, e))?;
        if rec.len() != 4 {
            return Err(Error::Parse(format!(
                "{}: row {i} has {} fields, expected 4",
                path.display(),
                rec.len()
            )));
        }
        out.push(EpochRecord {
            epoch: parse_field(path, i, &rec[0])? as usize,
            mse: parse_field(path, i, &rec[1])?,
            d3_norm: parse_field(path, i, &rec[2])?,
            rescaled: rec[3].trim().parse::<bool>().map_err(|e| {
                Error::Parse(format!("{}: row {i}: '{}' ({e})", path.display(), &rec[3]))
            })?,
        });
    }
    Ok(out)
}

/// Write a transition dataset as CSV with header
/// `x_0..x_{n-1}, u_0..u_{m-1}, xn_0..xn_{n-1}`.
pub fn write_dataset_csv(path: &Path, data: &SysidDataset) -> Result<()> {
    let (n_x, n_u) = (data.n_x(), data.n_u());
    let mut header = Vec::with_capacity(2 * n_x + n_u);
    header.extend((0..n_x).map(|i| format!("x_{i}")));
    header.extend((0..n_u).map(|i| format!("u_{i}")));
    header.extend((0..n_x).map(|i| format!("xn_{i}")));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header).map_err(|e| csv_parse_error(path, e))?;
    for s in data.samples() {
        let row: Vec<String> = s
            .x
            .iter()
            .chain(s.u.iter())
            .chain(s.x_next.iter())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row).map_err(|e| csv_parse_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<SysidDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers().map_err(|e| csv_parse_error(path, e))?;
    let n_x = headers.iter().filter(|h| h.starts_with("x_")).count();
    let n_u = headers.iter().filter(|h| h.starts_with("u_")).count();
    let n_next = headers.iter().filter(|h| h.starts_with("xn_")).count();
    if n_x == 0 || n_x != n_next || headers.len() != 2 * n_x + n_u {
        return Err(Error::Parse(format!(
            "{}: header must read x_0..x_{{n-1}}, u_0..u_{{m-1}}, xn_0..xn_{{n-1}}; \
             found {n_x} state, {n_u} input, {n_next} next-state columns",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_parse_error(path, e))?;
        if rec.len() != 2 * n_x + n_u {
            return Err(Error::Parse(format!(
                "{}: row {i} has {} fields, expected {}",
                path.display(),
                rec.len(),
                2 * n_x + n_u
            )));
        }
        let mut vals = Vec::with_capacity(rec.len());
        for field in rec.iter() {
            vals.push(parse_field(path, i, field)?);
        }
        samples.push(SysidSample {
            x: DVector::from_column_slice(&vals[..n_x]),
            u: DVector::from_column_slice(&vals[n_x..n_x + n_u]),
            x_next: DVector::from_column_slice(&vals[n_x + n_u..]),
        });
    }
    SysidDataset::new(samples)
}

/// Write a state trajectory as CSV (`k, x_0..x_{n-1}, norm[, envelope]`),
/// optionally with the certificate's per-step envelope bound.
pub fn write_trajectory_csv(
    path: &Path,
    states: &[DVector<f64>],
    envelope: Option<&[f64]>,
) -> Result<()> {
    let n = states.first().map_or(0, |x| x.len());
    if let Some(env) = envelope {
        if env.len() != states.len() {
            return Err(Error::DimensionMismatch(format!(
                "envelope has {} entries for {} states",
                env.len(),
                states.len()
            )));
        }
    }
    let mut header = vec!["k".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.push("norm".into());
    if envelope.is_some() {
        header.push("envelope".into());
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header).map_err(|e| csv_parse_error(path, e))?;
    for (k, x) in states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        row.push(x.norm().to_string());
        if let Some(env) = envelope {
            row.push(env[k].to_string());
        }
        w.write_record(&row).map_err(|e| csv_parse_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a trajectory CSV; returns the states and the envelope column
/// when present.
pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<DVector<f64>>, Option<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers().map_err(|e| csv_parse_error(path, e))?;
    let n = headers.iter().filter(|h| h.starts_with("x_")).count();
    let has_env = headers.iter().any(|h| h == "envelope");
    let expected = 2 + n + has_env as usize;
    if headers.len() != expected {
        return Err(Error::Parse(format!(
            "{}: trajectory header has {} columns, expected {expected}",
            path.display(),
            headers.len()
        )));
    }
    let mut states = Vec::new();
    let mut env = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_parse_error(path, e))?;
        if rec.len() != expected {
            return Err(Error::Parse(format!(
                "{}: row {i} has {} fields, expected {expected}",
                path.display(),
                rec.len()
            )));
        }
        let mut x = DVector::zeros(n);
        for j in 0..n {
            x[j] = parse_field(path, i, &rec[1 + j])?;
        }
        states.push(x);
        if has_env {
            env.push(parse_field(path, i, &rec[expected - 1])?);
        }
    }
    Ok((states, if has_env { Some(env) } else { None }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::linalg;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    struct TempDir(PathBuf);

    impl TempDir {
        fn new(tag: &str) -> TempDir {
            let dir = std::env::temp_dir().join(format!(
                "ren-synth-io-{tag}-{}",
                std::process::id()
            ));
            fs::create_dir_all(&dir).unwrap();
            TempDir(dir)
        }

        fn path(&self, name: &str) -> PathBuf {
            self.0.join(name)
        }
    }

    impl Drop for TempDir {
        fn drop(&mut self) {
            let _ = fs::remove_dir_all(&self.0);
        }
    }

    fn random_controller(seed: u64) -> TransformedRenParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = Nonlinearity::uniform(Activation::Tanh, 2).normalized().unwrap();
        TransformedRenParams::new(
            linalg::randn_matrix(&mut rng, 2, 2, 0.3),
            linalg::randn_matrix(&mut rng, 2, 2, 0.3),
            linalg::randn_matrix(&mut rng, 2, 1, 0.3),
            linalg::randn_matrix(&mut rng, 1, 2, 0.3),
            linalg::randn_matrix(&mut rng, 1, 2, 0.3),
            linalg::randn_matrix(&mut rng, 1, 1, 0.3),
            linalg::randn_matrix(&mut rng, 2, 2, 0.3),
            linalg::randn_matrix(&mut rng, 2, 2, 0.2),
            linalg::randn_matrix(&mut rng, 2, 1, 0.3),
            phi,
        )
        .unwrap()
    }

    #[test]
    fn matrix_data_round_trips_and_validates() {
        let m = dmatrix![1.5, -2.25, 0.1; 4.0, 1e-17, -3.5];
        let d = MatrixData::from_matrix(&m);
        assert_eq!(d.rows, 2);
        assert_eq!(d.cols, 3);
        assert_eq!(d.data[1], -2.25); // row-major
        assert_eq!(d.to_matrix().unwrap(), m);
        let bad = MatrixData {
            rows: 2,
            cols: 2,
            data: vec![1.0, 2.0, 3.0],
        };
        assert!(bad.to_matrix().is_err());
    }

    #[test]
    fn plant_files_round_trip_bit_exactly() {
        let dir = TempDir::new("plants");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lti = PlantModel::Lti(
            PlantLti::new(
                linalg::randn_matrix(&mut rng, 2, 2, 1.0),
                linalg::randn_matrix(&mut rng, 2, 1, 1.0),
                linalg::randn_matrix(&mut rng, 1, 2, 1.0),
            )
            .unwrap(),
        );
        let sector = PlantModel::Sector(PlantSector::pendulum_benchmark());
        let nn = PlantModel::ImplicitNn(
            crate::sysid::init_implicit_nn(
                2,
                3,
                1,
                dmatrix![1.0, 0.0],
                Nonlinearity::uniform(Activation::LeakyRelu(0.25), 3),
                7,
            )
            .unwrap(),
        );
        for (name, model) in [("lti", &lti), ("sector", &sector), ("nn", &nn)] {
            let path = dir.path(&format!("{name}.toml"));
            save_plant(&path, model).unwrap();
            let loaded = load_plant(&path).unwrap();
            assert_eq!(&loaded, model, "{name} round trip");
            // Re-saving the loaded model reproduces the file byte-for-byte.
            let again = dir.path(&format!("{name}-again.toml"));
            save_plant(&again, &loaded).unwrap();
            assert_eq!(
                fs::read(&path).unwrap(),
                fs::read(&again).unwrap(),
                "{name} file stability"
            );
        }
    }

    #[test]
    fn controller_file_round_trips() {
        let dir = TempDir::new("controller");
        let ctrl = random_controller(11);
        let path = dir.path("controller.toml");
        save_controller(&path, &ctrl).unwrap();
        let loaded = load_controller(&path).unwrap();
        assert_eq!(loaded, ctrl);
        assert!(loaded.phi.is_normalized());
    }

    #[test]
    fn certificate_round_trips_with_file_hashes() {
        let dir = TempDir::new("cert");
        let plant_path = dir.path("plant.toml");
        let ctrl_path = dir.path("controller.toml");
        save_plant(&plant_path, &PlantModel::Sector(PlantSector::pendulum_benchmark()))
            .unwrap();
        save_controller(&ctrl_path, &random_controller(5)).unwrap();
        let artifact = CertificateArtifact {
            certificate: StabilityCertificate {
                p_mat: dmatrix![2.0, 2.0; 2.0, 4.0],
                lambda_delta: dvector![1.25],
                lambda_phi: dvector![0.5, 3.0],
                rho: 0.97,
                margin: -0.0625,
                u_mat: Some(dmatrix![2.0]),
                v_mat: Some(dmatrix![-0.5]),
            },
            plant_hash: Some(file_sha256(&plant_path).unwrap()),
            controller_hash: Some(file_sha256(&ctrl_path).unwrap()),
        };
        let path = dir.path("certificate.toml");
        save_certificate(&path, &artifact).unwrap();
        let loaded = load_certificate(&path).unwrap();
        assert_eq!(loaded, artifact);
        let hash = loaded.plant_hash.unwrap();
        assert_eq!(hash.len(), 64);
        assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
        // Touching the plant file changes its recorded identity.
        fs::write(&plant_path, "tampered").unwrap();
        assert_ne!(file_sha256(&plant_path).unwrap(), hash);
    }

    #[test]
    fn dataset_csv_round_trips_bit_exactly() {
        let dir = TempDir::new("dataset");
        let plant = PlantSector::pendulum_benchmark();
        let data = SysidDataset::from_plant(
            &plant,
            25,
            &[(-3.0, 3.0), (-8.0, 8.0)],
            &[(-2.0, 2.0)],
            17,
        )
        .unwrap();
        let path = dir.path("transitions.csv");
        write_dataset_csv(&path, &data).unwrap();
        let loaded = read_dataset_csv(&path).unwrap();
        assert_eq!(loaded.len(), data.len());
        for (a, b) in loaded.samples().iter().zip(data.samples()) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.u, b.u);
            assert_eq!(a.x_next, b.x_next);
        }
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("x_0,x_1,u_0,xn_0,xn_1"));
    }

    #[test]
    fn history_csv_round_trips() {
        let dir = TempDir::new("history");
        let history = vec![
            TrainRecord {
                iteration: 0,
                mean_reward: 1.5,
                lmi_margin: 2.5e-6,
                grad_norm: 0.0,
                projection_distance: 0.0,
                wall_time: 0.125,
            },
            TrainRecord {
                iteration: 1,
                mean_reward: -0.3333333333333333,
                lmi_margin: 1.0000000001e-6,
                grad_norm: 17.25,
                projection_distance: 0.015625,
                wall_time: 1.5,
            },
        ];
        let path = dir.path("history.csv");
        write_history_csv(&path, &history).unwrap();
        let loaded = read_history_csv(&path).unwrap();
        assert_eq!(loaded, history);
    }

    #[test]
    fn theta_hat_files_round_trip_bit_exactly() {
        use crate::convex::SynthesisLayout;
        use crate::projection::SynthesisSet;
        let dir = TempDir::new("theta");
        let plant = PlantSector::pendulum_benchmark();
        let layout = SynthesisLayout::for_plant(&plant, 4);
        let set = SynthesisSet::new(
            &plant,
            layout,
            0.999,
            DVector::from_element(plant.n_delta(), 1.0),
        )
        .unwrap();
        let th = layout.unpack(&set.sample(3, 1e-9).unwrap());
        let path = dir.path("theta_hat.toml");
        save_theta_hat(&path, &th).unwrap();
        let loaded = load_theta_hat(&path).unwrap();
        assert_eq!(loaded, th);
        let again = dir.path("theta_hat_again.toml");
        save_theta_hat(&again, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn sysid_history_csv_round_trips() {
        use crate::sysid::EpochRecord;
        let dir = TempDir::new("sysid-history");
        let history = vec![
            EpochRecord { epoch: 0, mse: 0.5, d3_norm: 0.25, rescaled: false },
            EpochRecord { epoch: 1, mse: 1e-7, d3_norm: 0.99, rescaled: true },
        ];
        let path = dir.path("loss.csv");
        write_sysid_history_csv(&path, &history).unwrap();
        assert_eq!(read_sysid_history_csv(&path).unwrap(), history);
    }

    #[test]
    fn trajectory_csv_round_trips_with_and_without_envelope() {
        let dir = TempDir::new("trajectory");
        let states = vec![dvector![1.0, -2.0], dvector![0.5, 0.25], dvector![0.1, 0.0]];
        let bare = dir.path("bare.csv");
        write_trajectory_csv(&bare, &states, None).unwrap();
        let (loaded, env) = read_trajectory_csv(&bare).unwrap();
        assert_eq!(loaded, states);
        assert!(env.is_none());

        let bounds = vec![3.0, 2.7, 2.43];
        let with_env = dir.path("env.csv");
        write_trajectory_csv(&with_env, &states, Some(&bounds)).unwrap();
        let (loaded, env) = read_trajectory_csv(&with_env).unwrap();
        assert_eq!(loaded, states);
        assert_eq!(env.unwrap(), bounds);
        assert!(write_trajectory_csv(&with_env, &states, Some(&bounds[..2])).is_err());
    }

    #[test]
    fn malformed_files_are_reported_as_parse_errors() {
        let dir = TempDir::new("malformed");
        let path = dir.path("bad.toml");
        fs::write(&path, "kind = \"warp_drive\"").unwrap();
        match load_plant(&path) {
            Err(Error::Parse(_)) => {}
            other => panic!("expected a parse error, got {other:?}"),
        }
        let nl = NonlinearityData {
            activation: "softplus".into(),
            param: None,
            alpha: vec![0.0],
            beta: vec![1.0],
            normalized: false,
        };
        assert!(matches!(nl.to_nonlinearity(), Err(Error::Parse(_))));
        let leaky = NonlinearityData {
            activation: "leaky_relu".into(),
            param: None,
            alpha: vec![0.1],
            beta: vec![1.0],
            normalized: false,
        };
        assert!(matches!(leaky.to_nonlinearity(), Err(Error::Parse(_))));
    }
}

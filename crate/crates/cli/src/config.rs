//! Run-configuration files: one TOML schema shared by the subcommands,
//! with plant models either inline or by file reference.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use ren_synth::activation::Activation;
use ren_synth::error::{Error, Result};
use ren_synth::io;
use ren_synth::plant::{PlantLti, PlantModel, PlantSector};
use ren_synth::sysid::SysidOptimizer;
use ren_synth::training::GradientMode;

/// Activation by registry name, shared with the artifact formats.
pub fn parse_activation(name: &str, param: Option<f64>) -> Result<Activation> {
    match (name, param) {
        ("tanh", None) => Ok(Activation::Tanh),
        ("relu", None) => Ok(Activation::Relu),
        ("leaky_relu", Some(a)) => Ok(Activation::LeakyRelu(a)),
        ("leaky_relu", None) => {
            Err(Error::Parse("leaky_relu needs activation_param".into()))
        }
        ("v_minus_sin", None) => Ok(Activation::VMinusSin),
        (other, _) => Err(Error::Parse(format!(
            "unknown activation '{other}' (have: tanh, relu, leaky_relu, v_minus_sin)"
        ))),
    }
}

pub fn parse_grad_mode(name: &str) -> Result<GradientMode> {
    match name {
        "analytic" => Ok(GradientMode::Analytic),
        "finite-difference" | "fd" => Ok(GradientMode::FiniteDifference),
        other => Err(Error::Parse(format!(
            "unknown gradient mode '{other}' (have: analytic, finite-difference)"
        ))),
    }
}

/// A plant reference in a config file: a named builtin, an inline LTI
/// triple, or a path to a plant artifact.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    /// `pendulum`, `lti`, or `file`.
    pub kind: String,
    /// For `file`: path to the plant artifact, relative to the config file.
    pub path: Option<PathBuf>,
    /// For `lti`: matrices as arrays of rows.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<Vec<f64>>>,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Parse(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{what}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl PlantSpec {
    /// Resolve to a sector-form plant; `base` anchors relative file paths.
    pub fn resolve(&self, base: &Path) -> Result<PlantSector> {
        match self.kind.as_str() {
            "pendulum" => Ok(PlantSector::pendulum_benchmark()),
            "lti" => {
                let take = |field: &Option<Vec<Vec<f64>>>, name: &str| {
                    field.clone().ok_or_else(|| {
                        Error::Parse(format!("lti plant needs field '{name}'"))
                    })
                };
                let lti = PlantLti::new(
                    rows_to_matrix(&take(&self.a, "a")?, "a")?,
                    rows_to_matrix(&take(&self.b, "b")?, "b")?,
                    rows_to_matrix(&take(&self.c, "c")?, "c")?,
                )?;
                Ok(PlantSector::from_lti(&lti))
            }
            "file" => {
                let rel = self.path.as_ref().ok_or_else(|| {
                    Error::Parse("file plant needs field 'path'".into())
                })?;
                let path = if rel.is_absolute() { rel.clone() } else { base.join(rel) };
                plant_to_sector(io::load_plant(&path)?)
            }
            other => Err(Error::Parse(format!(
                "unknown plant kind '{other}' (have: pendulum, lti, file)"
            ))),
        }
    }
}

/// View any stored plant model in sector form.
pub fn plant_to_sector(model: PlantModel) -> Result<PlantSector> {
    match model {
        PlantModel::Lti(p) => Ok(PlantSector::from_lti(&p)),
        PlantModel::Sector(p) => Ok(p),
        PlantModel::ImplicitNn(p) => p.as_sector_plant(),
    }
}

/// `train` configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    /// Model used for projection and certification.
    pub plant: PlantSpec,
    /// Model rolled out for rewards; defaults to `plant`.
    pub rollout: Option<PlantSpec>,
    pub reward: RewardSection,
    pub controller: ControllerSection,
    pub training: TrainingSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    /// Builtin reward name (`bias-effort`, `bias-quadratic`).
    pub name: String,
    pub horizon: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub n_phi: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    pub activation_param: Option<f64>,
}

fn default_activation() -> String {
    "tanh".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub rho: f64,
    pub x0_box: Vec<[f64; 2]>,
    pub learning_rate: f64,
    pub batch: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    pub strictness: Option<f64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_true")]
    pub recenter: bool,
    #[serde(default)]
    pub halve_on_decrease: bool,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_grad_mode")]
    pub grad_mode: String,
}

fn default_eval_batch() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_solver_tol() -> f64 {
    1e-9
}
fn default_grad_mode() -> String {
    "analytic".into()
}

/// `sysid` configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysidFile {
    pub model: SysidModelSection,
    pub training: SysidTrainingSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysidModelSection {
    /// Nonlinear channels of the implicit block.
    pub n_q: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    pub activation_param: Option<f64>,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysidTrainingSection {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub batch: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_true")]
    pub train_d3: bool,
    /// Fraction of the dataset used for fitting; the rest is held out.
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_alpha() -> f64 {
    0.99
}
fn default_optimizer() -> String {
    "adam".into()
}
fn default_split() -> f64 {
    0.8
}

pub fn parse_optimizer(name: &str) -> Result<SysidOptimizer> {
    match name {
        "adam" => Ok(SysidOptimizer::Adam),
        "gd" => Ok(SysidOptimizer::Gd),
        other => Err(Error::Parse(format!(
            "unknown optimizer '{other}' (have: adam, gd)"
        ))),
    }
}

pub fn load_train_file(path: &Path) -> Result<TrainFile> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn load_sysid_file(path: &Path) -> Result<SysidFile> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

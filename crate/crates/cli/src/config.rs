use std::path::PathBuf;

use memoctrl::kernels::{matrix_from_rows, KernelLiteral};
use memoctrl::{ExpPolyKernel, Injector, MemoryVariant, MemorySystem, MovingWindow, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "M", default)]
    pub memory: Option<KernelLiteral>,
    #[serde(rename = "M_tilde", default)]
    pub memory_tilde: Option<KernelLiteral>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::new(self.horizon, self.steps)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub system: SystemConfig,
    pub grid: GridConfig,
    pub y0: Vec<f64>,
    /// Control trajectory CSV, relative to the configuration file.
    #[serde(default)]
    pub u: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointConfig {
    pub system: SystemConfig,
    pub grid: GridConfig,
    #[serde(rename = "w_T")]
    pub w_t: Vec<f64>,
    #[serde(rename = "z_T")]
    pub z_t: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionChoice {
    I,
    Ii,
    Iii,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub system: SystemConfig,
    pub condition: ConditionChoice,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub closure_tol: Option<f64>,
    #[serde(default)]
    pub g_tol: Option<f64>,
    #[serde(default)]
    pub max_blocks: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeConfig {
    pub system: SystemConfig,
    pub grid: GridConfig,
    pub y0: Vec<f64>,
    pub epsilon: f64,
    #[serde(default)]
    pub cg_tol: Option<f64>,
    #[serde(default)]
    pub cg_max: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub c0: f64,
    pub c1: f64,
    pub r: f64,
}

impl WindowConfig {
    pub fn build(&self) -> Result<MovingWindow, CliError> {
        Ok(MovingWindow::new(self.c0, self.c1, self.r)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParabolicBlock {
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "N")]
    pub nodes: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub window: WindowConfig,
    pub kernel: KernelLiteral,
    pub kernel_tilde: KernelLiteral,
    pub variant: MemoryVariant,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineProfile {
    pub profile: String,
    #[serde(default = "first_mode")]
    pub mode: usize,
}

fn first_mode() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum InitialProfile {
    Values(Vec<f64>),
    Named(SineProfile),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParabolicConfig {
    pub parabolic: ParabolicBlock,
    pub steps: usize,
    pub y0: InitialProfile,
    pub epsilon: f64,
    #[serde(default)]
    pub cg_tol: Option<f64>,
    #[serde(default)]
    pub cg_max: Option<usize>,
}

pub fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, CliError> {
    matrix_from_rows(rows).map_err(|e| CliError::Validation(format!("{name}: {e}")))
}

pub fn vector(values: &[f64], n: usize, name: &str) -> Result<DVector<f64>, CliError> {
    if values.len() != n {
        return Err(CliError::Validation(format!(
            "{name} has {} entries, the state has {n}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Validation(format!("{name} has non-finite entries")));
    }
    Ok(DVector::from_column_slice(values))
}

fn kernel(lit: &Option<KernelLiteral>, n: usize, name: &str) -> Result<ExpPolyKernel, CliError> {
    match lit {
        None => Ok(ExpPolyKernel::zero(n)),
        Some(lit) => lit
            .to_kernel(n)
            .map_err(|e| CliError::Validation(format!("{name}: {e}"))),
    }
}

impl SystemConfig {
    pub fn build(&self, horizon: f64) -> Result<MemorySystem, CliError> {
        let a = matrix(&self.a, "A")?;
        let n = a.nrows();
        let b = matrix(&self.b, "B")?;
        let memory = kernel(&self.memory, n, "M")?;
        let memory_tilde = kernel(&self.memory_tilde, n, "M_tilde")?;
        Ok(MemorySystem::new(a, memory, memory_tilde, Injector::Constant(b), horizon)?)
    }
}

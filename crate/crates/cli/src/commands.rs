use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use memoctrl::{
    assemble_system, check_condition_i, check_condition_ii, check_condition_iii, coverage_check, Discretization,
    Hum, Mesh1D, RankOptions, SynthesisOptions, SynthesisResult, TimeGrid, Trajectory, Verdict,
};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{
    vector, AdjointConfig, ConditionChoice, InitialProfile, ParabolicConfig, RankConfig, SimulateConfig,
    SynthesizeConfig,
};
use crate::error::CliError;

pub const PARABOLIC_CG_MAX: usize = 500;

/// Files produced by a command, written only once the command succeeds.
#[derive(Debug, Default)]
pub struct Outputs {
    pub files: Vec<(String, Vec<u8>)>,
    /// Set when the files are still written but the run must report failure.
    pub status: Option<CliError>,
}

impl Outputs {
    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        bytes.push(b'\n');
        self.files.push((name.to_owned(), bytes));
        Ok(())
    }

    fn csv(&mut self, name: &str, traj: &Trajectory) -> Result<(), CliError> {
        let mut bytes = Vec::new();
        traj.write_csv(&mut bytes)?;
        self.files.push((name.to_owned(), bytes));
        Ok(())
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Input {
        path: path.to_owned(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn norm_check(v: &DVector<f64>, what: &str) -> Result<(), CliError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{what} is not finite")))
    }
}

#[derive(Serialize)]
struct SimulationSummary {
    #[serde(rename = "T")]
    horizon: f64,
    steps: usize,
    terminal_state: Vec<f64>,
    terminal_state_norm: f64,
    memory: Vec<f64>,
    memory_norm: f64,
}

pub fn simulate(config_path: &Path) -> Result<Outputs, CliError> {
    let cfg: SimulateConfig = load(config_path)?;
    let grid = cfg.grid.build()?;
    let sys = cfg.system.build(grid.horizon())?;
    let y0 = vector(&cfg.y0, sys.state_dim(), "y0")?;
    let u = match &cfg.u {
        Some(p) => {
            let path = resolve(config_path, p);
            let file = fs::File::open(&path).map_err(|source| CliError::Input { path: path.clone(), source })?;
            Some(Trajectory::read_csv(file)?)
        }
        None => None,
    };
    let disc = Discretization::new(&sys, grid)?;
    debug!("simulating n = {} over {} steps", sys.state_dim(), grid.steps());
    let y = disc.forward(&y0, u.as_ref())?;
    let mem = disc.memory_at_horizon(&y)?;
    norm_check(&mem, "memory functional")?;
    let summary = SimulationSummary {
        horizon: grid.horizon(),
        steps: grid.steps(),
        terminal_state: y.last().iter().copied().collect(),
        terminal_state_norm: y.last().norm(),
        memory: mem.iter().copied().collect(),
        memory_norm: mem.norm(),
    };
    info!("|y(T)| = {:e}, |memory| = {:e}", summary.terminal_state_norm, summary.memory_norm);
    let mut out = Outputs::default();
    out.csv("trajectory.csv", &y)?;
    out.json("summary.json", &summary)?;
    Ok(out)
}

#[derive(Serialize)]
struct AdjointSummary {
    #[serde(rename = "T")]
    horizon: f64,
    steps: usize,
    w0: Vec<f64>,
    w0_norm: f64,
}

pub fn adjoint(config_path: &Path) -> Result<Outputs, CliError> {
    let cfg: AdjointConfig = load(config_path)?;
    let grid = cfg.grid.build()?;
    let sys = cfg.system.build(grid.horizon())?;
    let n = sys.state_dim();
    let w_t = vector(&cfg.w_t, n, "w_T")?;
    let z_t = vector(&cfg.z_t, n, "z_T")?;
    let w = Discretization::new(&sys, grid)?.adjoint(&w_t, &z_t)?;
    let w0 = w.value(0);
    let summary = AdjointSummary {
        horizon: grid.horizon(),
        steps: grid.steps(),
        w0: w0.iter().copied().collect(),
        w0_norm: w0.norm(),
    };
    let mut out = Outputs::default();
    out.csv("adjoint.csv", &w)?;
    out.json("summary.json", &summary)?;
    Ok(out)
}

pub fn check_rank(config_path: &Path) -> Result<Outputs, CliError> {
    let cfg: RankConfig = load(config_path)?;
    let sys = cfg.system.build(1.0)?;
    let defaults = RankOptions::default();
    let opts = RankOptions {
        tol: cfg.tol.unwrap_or(defaults.tol),
        closure_tol: cfg.closure_tol.unwrap_or(defaults.closure_tol),
        g_tol: cfg.g_tol.unwrap_or(defaults.g_tol),
        max_blocks: cfg.max_blocks,
    };
    let report = match cfg.condition {
        ConditionChoice::I => check_condition_i(&sys, &opts)?,
        ConditionChoice::Ii => check_condition_ii(&sys, &opts)?,
        ConditionChoice::Iii => check_condition_iii(&sys, opts.tol)?,
    };
    info!("verdict {:?}: rank {} of {}", report.verdict, report.rank, report.target);
    let mut out = Outputs::default();
    out.json("rank_report.json", &report)?;
    if report.verdict == Verdict::Inconclusive {
        out.status = Some(CliError::Inconclusive(report.stop_reason.clone()));
    }
    Ok(out)
}

fn synthesis_options(epsilon: f64, cg_tol: Option<f64>, cg_max: Option<usize>) -> SynthesisOptions {
    let mut opts = SynthesisOptions::new(epsilon);
    if let Some(tol) = cg_tol {
        opts.cg_tol = tol;
    }
    opts.cg_max = cg_max;
    opts
}

fn log_synthesis(res: &SynthesisResult) {
    if !res.converged {
        warn!("conjugate gradient stopped after {} iterations without reaching tolerance", res.iterations);
    }
    info!(
        "|y(T)| = {:e}, |memory| = {:e}, cost = {:e}",
        res.terminal_state_norm, res.memory_norm, res.cost
    );
}

pub fn synthesize(config_path: &Path) -> Result<Outputs, CliError> {
    let cfg: SynthesizeConfig = load(config_path)?;
    let grid = cfg.grid.build()?;
    let sys = cfg.system.build(grid.horizon())?;
    let y0 = vector(&cfg.y0, sys.state_dim(), "y0")?;
    let opts = synthesis_options(cfg.epsilon, cfg.cg_tol, cfg.cg_max);
    let res = Hum::new(&sys, grid)?.synthesize(&y0, &opts)?;
    log_synthesis(&res);
    let mut out = Outputs::default();
    out.csv("control.csv", &res.control)?;
    out.json("synthesis.json", &res)?;
    Ok(out)
}

#[derive(Serialize)]
struct ParabolicSummary {
    #[serde(rename = "L")]
    length: f64,
    #[serde(rename = "N")]
    nodes: usize,
    h: f64,
    #[serde(rename = "T")]
    horizon: f64,
    steps: usize,
    variant: memoctrl::MemoryVariant,
    window: memoctrl::MovingWindow,
    y0_norm: f64,
}

pub fn parabolic(config_path: &Path) -> Result<Outputs, CliError> {
    let cfg: ParabolicConfig = load(config_path)?;
    let block = &cfg.parabolic;
    let mesh = Mesh1D::new(block.length, block.nodes)?;
    let window = block.window.build()?;
    let memory = block.kernel.to_kernel(1)?;
    let memory_tilde = block.kernel_tilde.to_kernel(1)?;
    let y0 = match &cfg.y0 {
        InitialProfile::Values(v) => vector(v, mesh.interior_nodes(), "y0")?,
        InitialProfile::Named(p) if p.profile == "sine" && p.mode >= 1 => mesh.sine_profile(p.mode),
        InitialProfile::Named(p) => {
            return Err(CliError::Validation(format!(
                "unknown initial profile {:?} with mode {}",
                p.profile, p.mode
            )))
        }
    };
    let grid = TimeGrid::new(block.horizon, cfg.steps)?;
    let coverage = coverage_check(&window, &mesh);
    let sys = assemble_system(&mesh, &window, &memory, &memory_tilde, block.variant, block.horizon)?;
    let opts = synthesis_options(cfg.epsilon, cfg.cg_tol, Some(cfg.cg_max.unwrap_or(PARABOLIC_CG_MAX)));
    let res = Hum::new(&sys, grid)?.synthesize(&y0, &opts)?;
    log_synthesis(&res);
    let summary = ParabolicSummary {
        length: mesh.length(),
        nodes: mesh.interior_nodes(),
        h: mesh.spacing(),
        horizon: block.horizon,
        steps: grid.steps(),
        variant: block.variant,
        window,
        y0_norm: y0.norm(),
    };
    let mut out = Outputs::default();
    out.json("system.json", &summary)?;
    out.json("coverage.json", &coverage)?;
    out.csv("control.csv", &res.control)?;
    out.json("synthesis.json", &res)?;
    Ok(out)
}

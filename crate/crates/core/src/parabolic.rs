//! 1-D heat equation with memory and a moving control window.
//!
//! ```text
//! y_t = y_xx + ∫_0^t m(t-s) [y or y_xx](s) ds + u χ_{ω(t)}   on (0, L)
//! ```
//!
//! semidiscretized by central differences with homogeneous Dirichlet
//! conditions. The window `ω(t) = (c(t) - r, c(t) + r)` sweeps linearly from
//! `c0` to `c1` over `[0, T]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{ExpPolyKernel, KernelError};
use crate::volterra::{Injector, MemorySystem, VolterraError};

#[derive(Debug, Error)]
pub enum ParabolicError {
    #[error("mesh needs L > 0 and at least 3 interior nodes (got L = {length}, N = {nodes})")]
    InvalidMesh { length: f64, nodes: usize },
    #[error("window half-width must be positive and centers finite")]
    InvalidWindow,
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("control window contains no mesh node at t = {t}")]
    EmptyWindow { t: f64 },
    #[error("memory kernels must be scalar, got dimension {0}")]
    NonScalarKernel(usize),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    System(#[from] VolterraError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh1D {
    length: f64,
    nodes: usize,
}

impl Mesh1D {
    pub fn new(length: f64, nodes: usize) -> Result<Self, ParabolicError> {
        if !(length > 0.0 && length.is_finite()) || nodes < 3 {
            return Err(ParabolicError::InvalidMesh { length, nodes });
        }
        Ok(Self { length, nodes })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn interior_nodes(&self) -> usize {
        self.nodes
    }

    pub fn spacing(&self) -> f64 {
        self.length / (self.nodes + 1) as f64
    }

    /// `x_i = i·h`, `i = 1..=N`.
    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (1..=self.nodes).map(|i| self.node(i))
    }

    /// `sin(kπx/L)` at the interior nodes.
    pub fn sine_profile(&self, mode: usize) -> DVector<f64> {
        let w = mode as f64 * std::f64::consts::PI / self.length;
        DVector::from_iterator(self.nodes, self.nodes().map(|x| (w * x).sin()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingWindow {
    pub c0: f64,
    pub c1: f64,
    pub r: f64,
}

impl MovingWindow {
    pub fn new(c0: f64, c1: f64, r: f64) -> Result<Self, ParabolicError> {
        if !(r > 0.0 && r.is_finite() && c0.is_finite() && c1.is_finite()) {
            return Err(ParabolicError::InvalidWindow);
        }
        Ok(Self { c0, c1, r })
    }

    pub fn fixed(c: f64, r: f64) -> Result<Self, ParabolicError> {
        Self::new(c, c, r)
    }

    pub fn center(&self, t: f64, horizon: f64) -> f64 {
        self.c0 + (self.c1 - self.c0) * t / horizon
    }

    /// Open interval `(c(t) - r, c(t) + r)`.
    pub fn contains(&self, x: f64, t: f64, horizon: f64) -> bool {
        (x - self.center(t, horizon)).abs() < self.r
    }
}

/// Central-difference Laplacian with Dirichlet rows eliminated.
pub fn discretize_laplacian(mesh: &Mesh1D) -> DMatrix<f64> {
    let n = mesh.interior_nodes();
    let inv_h2 = 1.0 / (mesh.spacing() * mesh.spacing());
    DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => -2.0 * inv_h2,
        1 => inv_h2,
        _ => 0.0,
    })
}

fn mask(win: &MovingWindow, mesh: &Mesh1D, horizon: f64, t: f64) -> DMatrix<f64> {
    let diag = DVector::from_iterator(
        mesh.interior_nodes(),
        mesh.nodes().map(|x| if win.contains(x, t, horizon) { 1.0 } else { 0.0 }),
    );
    DMatrix::from_diagonal(&diag)
}

/// A time in `[0, T]` at which the window holds no node, if any.
fn first_empty_time(win: &MovingWindow, mesh: &Mesh1D, horizon: f64) -> Option<f64> {
    // the window holds x_i exactly while c(t) ∈ (x_i - r, x_i + r)
    let mut reach: Vec<(f64, f64)> = Vec::new();
    for x in mesh.nodes() {
        let (lo, hi) = (x - win.r, x + win.r);
        match reach.last_mut() {
            Some(last) if lo < last.1 => last.1 = last.1.max(hi),
            _ => reach.push((lo, hi)),
        }
    }
    let inside = |c: f64| reach.iter().any(|&(lo, hi)| lo < c && c < hi);
    let (cmin, cmax) = (win.c0.min(win.c1), win.c0.max(win.c1));
    let time_of = |c: f64| {
        if win.c1 == win.c0 {
            0.0
        } else {
            ((c - win.c0) / (win.c1 - win.c0) * horizon).clamp(0.0, horizon)
        }
    };
    if !inside(cmin) {
        return Some(time_of(cmin));
    }
    // [cmin, cmax] lies in one merged piece iff that piece also holds cmax
    let piece = reach.iter().find(|&&(lo, hi)| lo < cmin && cmin < hi)?;
    if cmax < piece.1 {
        None
    } else {
        Some(time_of(piece.1.min(cmax)))
    }
}

/// `t ↦ diag(χ_{ω(t)}(x_i))`.
pub fn moving_support_injector(win: &MovingWindow, mesh: &Mesh1D, horizon: f64) -> Result<Injector, ParabolicError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(ParabolicError::InvalidHorizon(horizon));
    }
    if let Some(t) = first_empty_time(win, mesh, horizon) {
        return Err(ParabolicError::EmptyWindow { t });
    }
    let n = mesh.interior_nodes();
    let (win, mesh) = (*win, *mesh);
    Ok(Injector::time_varying(n, n, move |t| mask(&win, &mesh, horizon, t)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coverage {
    pub covered: bool,
    /// Uncovered pieces of `[0, L]` as `(start, end)`; the end touching the
    /// sweep is open.
    pub uncovered: Vec<(f64, f64)>,
    pub swept: (f64, f64),
}

/// Whether the swept region `∪_t ω(t)` contains `[0, L]`.
pub fn coverage_check(win: &MovingWindow, mesh: &Mesh1D) -> Coverage {
    let lo = win.c0.min(win.c1) - win.r;
    let hi = win.c0.max(win.c1) + win.r;
    let l = mesh.length();
    let mut uncovered = Vec::new();
    if lo >= l || hi <= 0.0 {
        uncovered.push((0.0, l));
    } else {
        if lo >= 0.0 {
            uncovered.push((0.0, lo));
        }
        if hi <= l {
            uncovered.push((hi, l));
        }
    }
    Coverage {
        covered: uncovered.is_empty(),
        uncovered,
        swept: (lo, hi),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryVariant {
    /// Memory acts on the state: `M = m·I`.
    StateMemory,
    /// Memory acts on the Laplacian: `M = m·Δ_h`.
    LaplacianMemory,
}

fn scalar_kernel(k: &ExpPolyKernel, n: usize) -> Result<ExpPolyKernel, ParabolicError> {
    if k.dim() != 1 {
        return Err(ParabolicError::NonScalarKernel(k.dim()));
    }
    Ok(k.expand_scalar(n)?)
}

/// Heat system on `mesh` with memory `m`, target memory `m̃`, and the
/// moving window as control operator.
pub fn assemble_system(
    mesh: &Mesh1D,
    win: &MovingWindow,
    memory: &ExpPolyKernel,
    memory_tilde: &ExpPolyKernel,
    variant: MemoryVariant,
    horizon: f64,
) -> Result<MemorySystem, ParabolicError> {
    let n = mesh.interior_nodes();
    let lap = discretize_laplacian(mesh);
    let m = match variant {
        MemoryVariant::StateMemory => scalar_kernel(memory, n)?,
        MemoryVariant::LaplacianMemory => scalar_kernel(memory, n)?.right_multiply(&lap)?,
    };
    let mt = scalar_kernel(memory_tilde, n)?;
    let coverage = coverage_check(win, mesh);
    if !coverage.covered {
        log::warn!("control window does not sweep the whole domain; uncovered {:?}", coverage.uncovered);
    }
    let injector = moving_support_injector(win, mesh, horizon)?;
    Ok(MemorySystem::new(lap, m, mt, injector, horizon)?)
}

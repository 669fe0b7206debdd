//! Trapezoidal time stepping for `y' = A y + ∫_0^t M(t-s) y(s) ds + B(t) u`
//! and its adjoint, plus memory functionals `∫_0^T M̃(T-s) y(s) ds`.
//!
//! The local term is treated by the implicit trapezoidal rule and the
//! convolution by trapezoidal quadrature over the stored history. The
//! new-time quadrature weight `(Δt/2)·M(0)` is folded into the step matrix
//! `I - (Δt/2)A - (Δt²/4)M(0)`, which is factored once per grid.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use thiserror::Error;

use crate::kernels::ExpPolyKernel;

#[derive(Debug, Error)]
pub enum VolterraError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("grid horizon {grid} does not match system horizon {system}")]
    GridMismatch { grid: f64, system: f64 },
    #[error("step matrix is singular (step {step})")]
    SingularStep { step: usize },
    #[error("non-finite values at step {step}")]
    Divergence { step: usize },
    #[error("time {at} is not a grid node")]
    NotOnGrid { at: f64 },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for VolterraError {
    fn from(e: csv::Error) -> Self {
        VolterraError::Csv(e.to_string())
    }
}

/// Uniform grid `t_k = k·T/N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, VolterraError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(VolterraError::InvalidHorizon(horizon));
        }
        if steps < 2 {
            return Err(VolterraError::InvalidGrid(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    /// Grid with a prescribed step size; `horizon / dt` must be an integer.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self, VolterraError> {
        let steps = (horizon / dt).round();
        if !steps.is_finite() || (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(VolterraError::InvalidGrid(format!(
                "step {dt} does not divide horizon {horizon}"
            )));
        }
        Self::new(horizon, steps as usize)
    }

    /// Recovers a grid from explicit nodes, rejecting anything non-uniform.
    pub fn from_nodes(nodes: &[f64]) -> Result<Self, VolterraError> {
        if nodes.len() < 3 {
            return Err(VolterraError::InvalidGrid(format!(
                "need at least 3 nodes, got {}",
                nodes.len()
            )));
        }
        let horizon = *nodes.last().unwrap();
        let grid = Self::new(horizon, nodes.len() - 1)?;
        let tol = 1e-9 * horizon.max(1.0);
        for (k, &t) in nodes.iter().enumerate() {
            if (t - grid.node(k)).abs() > tol {
                return Err(VolterraError::InvalidGrid(format!(
                    "node {k} at {t} breaks uniform spacing {}",
                    grid.dt()
                )));
            }
        }
        Ok(grid)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.node(k))
    }

    /// Composite trapezoid weight of node `k` (without the `Δt` factor).
    pub fn trapezoid_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.steps {
            0.5
        } else {
            1.0
        }
    }

    /// Index of `t` if it coincides with a node.
    pub fn index_of(&self, t: f64) -> Result<usize, VolterraError> {
        let k = (t / self.dt()).round();
        if k < 0.0 || k > self.steps as f64 || (k * self.dt() - t).abs() > 1e-9 * self.horizon.max(1.0)
        {
            return Err(VolterraError::NotOnGrid { at: t });
        }
        Ok(k as usize)
    }

    fn matches_horizon(&self, horizon: f64) -> bool {
        (self.horizon - horizon).abs() <= 1e-12 * horizon.max(1.0)
    }
}

/// Vector-valued samples, one per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    values: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self, VolterraError> {
        if values.len() != grid.len() {
            return Err(VolterraError::Dimension(format!(
                "{} samples for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        let dim = values[0].len();
        for (k, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(VolterraError::Dimension(format!(
                    "sample {k} has length {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(VolterraError::Divergence { step: k });
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            values: vec![DVector::zeros(dim); grid.len()],
        }
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> DVector<f64>) -> Result<Self, VolterraError> {
        let values = grid.nodes().map(&mut f).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }

    pub fn last(&self) -> &DVector<f64> {
        self.values.last().expect("trajectories are never empty")
    }

    /// Trapezoidal `∫_0^T |v(t)|² dt`.
    pub fn squared_l2(&self) -> f64 {
        let h = self.grid.dt();
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| h * self.grid.trapezoid_weight(k) * v.norm_squared())
            .sum()
    }

    /// Trapezoidal `∫_0^T (v(t), other(t)) dt`.
    pub fn inner(&self, other: &Trajectory) -> f64 {
        let h = self.grid.dt();
        self.values
            .iter()
            .zip(&other.values)
            .enumerate()
            .map(|(k, (a, b))| h * self.grid.trapezoid_weight(k) * a.dot(b))
            .sum()
    }

    /// Max over nodes of the max-abs difference.
    pub fn sup_distance(&self, other: &Trajectory) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }

    /// CSV with header `t,v0,...` and 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), VolterraError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for (k, v) in self.values.iter().enumerate() {
            let mut row = vec![format!("{:.16e}", self.grid.node(k))];
            row.extend(v.iter().map(|x| format!("{x:.16e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, VolterraError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let dim = header.len().saturating_sub(1);
        if header.get(0) != Some("t")
            || dim == 0
            || (0..dim).any(|i| header.get(i + 1) != Some(format!("v{i}").as_str()))
        {
            return Err(VolterraError::Csv(format!(
                "expected header t,v0,...; got {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        for record in r.records() {
            let record = record?;
            let parsed: Vec<f64> = record
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| VolterraError::Csv(e.to_string()))?;
            nodes.push(parsed[0]);
            values.push(DVector::from_column_slice(&parsed[1..]));
        }
        let grid = TimeGrid::from_nodes(&nodes)?;
        Self::new(grid, values)
    }
}

/// Control operator: constant `n×m` or a time-dependent `t ↦ B(t)`.
#[derive(Clone)]
pub enum Injector {
    Constant(DMatrix<f64>),
    TimeVarying {
        rows: usize,
        cols: usize,
        f: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
    },
}

impl fmt::Debug for Injector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Injector::Constant(b) => f.debug_tuple("Constant").field(b).finish(),
            Injector::TimeVarying { rows, cols, .. } => f
                .debug_struct("TimeVarying")
                .field("rows", rows)
                .field("cols", cols)
                .finish_non_exhaustive(),
        }
    }
}

impl Injector {
    pub fn time_varying(
        rows: usize,
        cols: usize,
        f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Injector::TimeVarying {
            rows,
            cols,
            f: Arc::new(f),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Injector::Constant(b) => b.shape(),
            Injector::TimeVarying { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            Injector::Constant(b) => b.clone(),
            Injector::TimeVarying { f, .. } => f(t),
        }
    }

    pub fn as_constant(&self) -> Option<&DMatrix<f64>> {
        match self {
            Injector::Constant(b) => Some(b),
            Injector::TimeVarying { .. } => None,
        }
    }
}

/// `y' = A y + ∫_0^t M(t-s) y(s) ds + B(t) u` on `[0, T]`, together with the
/// memory kernel `M̃` of the terminal target.
#[derive(Debug, Clone)]
pub struct MemorySystem {
    a: DMatrix<f64>,
    memory: ExpPolyKernel,
    memory_tilde: ExpPolyKernel,
    injector: Injector,
    horizon: f64,
}

impl MemorySystem {
    pub fn new(
        a: DMatrix<f64>,
        memory: ExpPolyKernel,
        memory_tilde: ExpPolyKernel,
        injector: Injector,
        horizon: f64,
    ) -> Result<Self, VolterraError> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(VolterraError::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if memory.dim() != n || memory_tilde.dim() != n {
            return Err(VolterraError::Dimension(format!(
                "kernels must be {n}x{n}, got M {d1}x{d1} and M̃ {d2}x{d2}",
                d1 = memory.dim(),
                d2 = memory_tilde.dim()
            )));
        }
        let (rows, cols) = injector.shape();
        if rows != n || cols == 0 {
            return Err(VolterraError::Dimension(format!(
                "B must be {n}xm with m > 0, got {rows}x{cols}"
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(VolterraError::InvalidHorizon(horizon));
        }
        Ok(Self {
            a,
            memory,
            memory_tilde,
            injector,
            horizon,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn memory(&self) -> &ExpPolyKernel {
        &self.memory
    }

    pub fn memory_tilde(&self) -> &ExpPolyKernel {
        &self.memory_tilde
    }

    pub fn injector(&self) -> &Injector {
        &self.injector
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.injector.shape().1
    }

    /// Same dynamics with a different terminal memory kernel.
    pub fn with_memory_tilde(&self, memory_tilde: ExpPolyKernel) -> Result<Self, VolterraError> {
        Self::new(
            self.a.clone(),
            self.memory.clone(),
            memory_tilde,
            self.injector.clone(),
            self.horizon,
        )
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self, VolterraError> {
        Self::new(
            self.a.clone(),
            self.memory.clone(),
            self.memory_tilde.clone(),
            self.injector.clone(),
            horizon,
        )
    }
}

/// A kernel tabulated on the lag grid `d·Δt`, kept in factored form
/// `K(dΔt) = Σ_b φ_b[d] C_b` so history sums cost O(n) per node and basis
/// element instead of O(n²).
#[derive(Debug, Clone)]
struct KernelTable {
    basis: Vec<(DMatrix<f64>, Vec<f64>)>,
    at_zero: DMatrix<f64>,
}

impl KernelTable {
    fn new(kernel: &ExpPolyKernel, grid: &TimeGrid) -> Self {
        let h = grid.dt();
        let basis = kernel
            .basis()
            .filter(|(_, _, c)| c.amax() > 0.0)
            .map(|(a, k, c)| {
                let phi = (0..grid.len())
                    .map(|d| {
                        let t = d as f64 * h;
                        (a * t).exp() * t.powi(k as i32)
                    })
                    .collect();
                (c.clone(), phi)
            })
            .collect();
        Self {
            basis,
            at_zero: kernel.eval(0.0),
        }
    }

    fn transposed(&self) -> Self {
        Self {
            basis: self
                .basis
                .iter()
                .map(|(c, phi)| (c.transpose(), phi.clone()))
                .collect(),
            at_zero: self.at_zero.transpose(),
        }
    }

    fn is_zero(&self) -> bool {
        self.basis.is_empty()
    }

    /// `K(dΔt)·v`.
    fn apply(&self, d: usize, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (c, phi) in &self.basis {
            out.gemv(phi[d], c, v, 1.0);
        }
        out
    }

    /// `Σ_j weight_j · K((k - j)Δt)·y_j` over `j ∈ range`, with `weight_j`
    /// supplied per index.
    fn lagged_sum(
        &self,
        k: usize,
        ys: &[DVector<f64>],
        range: std::ops::Range<usize>,
        weight: impl Fn(usize) -> f64,
    ) -> DVector<f64> {
        let n = ys[0].len();
        let mut out = DVector::zeros(n);
        let mut acc = DVector::zeros(n);
        for (c, phi) in &self.basis {
            acc.fill(0.0);
            for j in range.clone() {
                acc.axpy(weight(j) * phi[k - j], &ys[j], 1.0);
            }
            out.gemv(1.0, c, &acc, 1.0);
        }
        out
    }

    /// `Σ_{k > j} K((k - j)Δt)·v_k`.
    fn future_sum(&self, j: usize, vs: &[DVector<f64>]) -> DVector<f64> {
        let n = vs[0].len();
        let mut out = DVector::zeros(n);
        let mut acc = DVector::zeros(n);
        for (c, phi) in &self.basis {
            acc.fill(0.0);
            for (k, v) in vs.iter().enumerate().skip(j + 1) {
                acc.axpy(phi[k - j], v, 1.0);
            }
            out.gemv(1.0, c, &acc, 1.0);
        }
        out
    }
}

/// Per-grid precomputation for one system: tabulated kernels, node-sampled
/// `B(t_k)`, and the factored step matrices. Reused across repeated solves.
#[derive(Debug, Clone)]
pub struct Discretization {
    grid: TimeGrid,
    n: usize,
    m: usize,
    a: DMatrix<f64>,
    a_t: DMatrix<f64>,
    memory: KernelTable,
    memory_t: KernelTable,
    tilde: KernelTable,
    tilde_t: KernelTable,
    step: LU<f64, Dyn, Dyn>,
    step_t: LU<f64, Dyn, Dyn>,
    injector: Vec<DMatrix<f64>>,
}

/// Output of [`Discretization::discrete_adjoint`].
#[derive(Debug, Clone)]
pub struct DiscreteAdjoint {
    /// Node values `w̃_k` such that the control `u_k = B(t_k)ᵀ w̃_k` is the
    /// exact discrete gradient.
    pub weights: Trajectory,
    /// Sensitivity of the pairing with respect to `y(0)`; approximates `w(0)`.
    pub initial: DVector<f64>,
}

impl Discretization {
    pub fn new(sys: &MemorySystem, grid: TimeGrid) -> Result<Self, VolterraError> {
        if !grid.matches_horizon(sys.horizon()) {
            return Err(VolterraError::GridMismatch {
                grid: grid.horizon(),
                system: sys.horizon(),
            });
        }
        let n = sys.state_dim();
        let m = sys.control_dim();
        let h = grid.dt();
        let memory = KernelTable::new(sys.memory(), &grid);
        let tilde = KernelTable::new(sys.memory_tilde(), &grid);
        let step_matrix =
            DMatrix::identity(n, n) - sys.a() * (h / 2.0) - &memory.at_zero * (h * h / 4.0);
        let step = step_matrix.clone().lu();
        if !step.is_invertible() {
            return Err(VolterraError::SingularStep { step: 1 });
        }
        let step_t = step_matrix.transpose().lu();
        let injector = match sys.injector() {
            Injector::Constant(b) => vec![b.clone(); grid.len()],
            Injector::TimeVarying { .. } => grid
                .nodes()
                .map(|t| {
                    let b = sys.injector().at(t);
                    if b.shape() != (n, m) {
                        return Err(VolterraError::Dimension(format!(
                            "B({t}) is {}x{}, expected {n}x{m}",
                            b.nrows(),
                            b.ncols()
                        )));
                    }
                    Ok(b)
                })
                .collect::<Result<_, _>>()?,
        };
        Ok(Self {
            grid,
            n,
            m,
            a: sys.a().clone(),
            a_t: sys.a().transpose(),
            memory_t: memory.transposed(),
            memory,
            tilde_t: tilde.transposed(),
            tilde,
            step,
            step_t,
            injector,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    /// `B(t_k)`.
    pub fn injector_at(&self, k: usize) -> &DMatrix<f64> {
        &self.injector[k]
    }

    fn check_vector(&self, v: &DVector<f64>, what: &str) -> Result<(), VolterraError> {
        if v.len() != self.n {
            return Err(VolterraError::Dimension(format!(
                "{what} has length {}, expected {}",
                v.len(),
                self.n
            )));
        }
        Ok(())
    }

    fn check_on_grid(&self, traj: &Trajectory, dim: usize, what: &str) -> Result<(), VolterraError> {
        if traj.grid().steps() != self.grid.steps() || !traj.grid().matches_horizon(self.grid.horizon()) {
            return Err(VolterraError::InvalidGrid(format!(
                "{what} is sampled on a different grid"
            )));
        }
        if traj.dim() != dim {
            return Err(VolterraError::Dimension(format!(
                "{what} has dimension {}, expected {dim}",
                traj.dim()
            )));
        }
        Ok(())
    }

    /// Trapezoidal march of `y' = A y + ∫ M y + g` with node-sampled source.
    fn march(
        &self,
        a: &DMatrix<f64>,
        memory: &KernelTable,
        step: &LU<f64, Dyn, Dyn>,
        y0: DVector<f64>,
        source: Option<&[DVector<f64>]>,
    ) -> Result<Vec<DVector<f64>>, VolterraError> {
        let h = self.grid.dt();
        let steps = self.grid.steps();
        let mut ys = Vec::with_capacity(steps + 1);
        ys.push(y0);
        // c_k = h[½M(t_k)y_0 + Σ_{0<j<k} M(t_k - t_j)y_j + ½M(0)y_k], c_0 = 0
        let mut conv = DVector::zeros(self.n);
        for k in 0..steps {
            let known = if memory.is_zero() {
                DVector::zeros(self.n)
            } else {
                memory.lagged_sum(k + 1, &ys, 0..k + 1, |j| if j == 0 { 0.5 } else { 1.0 }) * h
            };
            let yk = &ys[k];
            let mut rhs = yk + (a * yk + &conv + &known) * (h / 2.0);
            if let Some(g) = source {
                rhs += (&g[k] + &g[k + 1]) * (h / 2.0);
            }
            let next = step
                .solve(&rhs)
                .ok_or(VolterraError::SingularStep { step: k + 1 })?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(VolterraError::Divergence { step: k + 1 });
            }
            conv = known + &memory.at_zero * &next * (h / 2.0);
            ys.push(next);
        }
        Ok(ys)
    }

    /// Forward solve from `y0`, optionally driven by the control `u`.
    pub fn forward(&self, y0: &DVector<f64>, u: Option<&Trajectory>) -> Result<Trajectory, VolterraError> {
        self.check_vector(y0, "y0")?;
        let source = match u {
            Some(u) => {
                self.check_on_grid(u, self.m, "control")?;
                Some(
                    u.values()
                        .iter()
                        .zip(&self.injector)
                        .map(|(uk, b)| b * uk)
                        .collect::<Vec<_>>(),
                )
            }
            None => None,
        };
        let ys = self.march(&self.a, &self.memory, &self.step, y0.clone(), source.as_deref())?;
        Trajectory::new(self.grid, ys)
    }

    /// Adjoint solve: `w' = -Aᵀw - ∫_t^T M(s-t)ᵀ w(s) ds + M̃(T-t)ᵀ z_T`,
    /// `w(T) = w_T`, integrated forward in `τ = T - t` by the same scheme.
    pub fn adjoint(&self, w_t: &DVector<f64>, z_t: &DVector<f64>) -> Result<Trajectory, VolterraError> {
        self.check_vector(w_t, "w_T")?;
        self.check_vector(z_t, "z_T")?;
        let source: Vec<DVector<f64>> = (0..self.grid.len())
            .map(|k| -self.tilde_t.apply(k, z_t))
            .collect();
        let mut vs = self.march(&self.a_t, &self.memory_t, &self.step_t, w_t.clone(), Some(&source))?;
        vs.reverse();
        Trajectory::new(self.grid, vs)
    }

    /// Exact transpose of [`Self::forward`] with respect to the trapezoidal
    /// pairing of sources.
    ///
    /// For every `y0` and node source `g_k = B(t_k)u_k` the forward solution
    /// satisfies, to round-off,
    /// `(w_T, y_N) - (z_T, mem(y)) = (initial, y0) + Σ_k Δt·ω_k (weights_k, g_k)`
    /// where `mem` is [`Self::memory_at_horizon`] and `ω_k` the trapezoid
    /// weights. Interior weights are second-order accurate samples of the
    /// continuous adjoint; the two end weights sit half a step inside.
    pub fn discrete_adjoint(
        &self,
        w_t: &DVector<f64>,
        z_t: &DVector<f64>,
    ) -> Result<DiscreteAdjoint, VolterraError> {
        self.check_vector(w_t, "w_T")?;
        self.check_vector(z_t, "z_T")?;
        let h = self.grid.dt();
        let steps = self.grid.steps();
        let n = self.n;
        // pairing vectors Ψ_j
        let mut psi: Vec<DVector<f64>> = (0..=steps)
            .map(|j| {
                if self.tilde_t.is_zero() {
                    DVector::zeros(n)
                } else {
                    self.tilde_t.apply(steps - j, z_t) * (-h * self.grid.trapezoid_weight(j))
                }
            })
            .collect();
        psi[steps] += w_t;

        let solve = |rhs: &DVector<f64>, j: usize| {
            self.step_t
                .solve(rhs)
                .ok_or(VolterraError::SingularStep { step: j })
        };
        let mut weights = vec![DVector::zeros(n); steps + 1];
        // μ_k = Δt·ω_k·w̃_k
        let mut mu = vec![DVector::zeros(n); steps + 1];

        weights[steps] = solve(&psi[steps], steps)?;
        mu[steps] = &weights[steps] * (h / 2.0);
        let mut tail = weights[steps].clone(); // Σ_{k>j} x_k
        for j in (1..steps).rev() {
            let lagged = if self.memory_t.is_zero() {
                DVector::zeros(n)
            } else {
                self.memory_t.future_sum(j, &mu)
            };
            let rhs = &psi[j] * 0.5 + &lagged * (h / 2.0) + &tail;
            let wj = solve(&rhs, j)?;
            let xj = &psi[j]
                + (&self.a_t * &wj) * h
                + (&self.memory_t.at_zero * &wj) * (h * h / 2.0)
                + lagged * h;
            if xj.iter().any(|v| !v.is_finite()) {
                return Err(VolterraError::Divergence { step: j });
            }
            tail += xj;
            mu[j] = &wj * h;
            weights[j] = wj;
        }
        weights[0] = tail.clone();
        mu[0] = &weights[0] * (h / 2.0);
        let lagged0 = if self.memory_t.is_zero() {
            DVector::zeros(n)
        } else {
            self.memory_t.future_sum(0, &mu)
        };
        let x0 = &psi[0] + (&self.a_t * &weights[0]) * (h / 2.0) + lagged0 * (h / 2.0);
        let initial = x0 + tail;
        Ok(DiscreteAdjoint {
            weights: Trajectory::new(self.grid, weights)?,
            initial,
        })
    }

    /// `u_k = B(t_k)ᵀ w_k`.
    pub fn control_from_adjoint(&self, w: &Trajectory) -> Result<Trajectory, VolterraError> {
        self.check_on_grid(w, self.n, "adjoint")?;
        let values = w
            .values()
            .iter()
            .zip(&self.injector)
            .map(|(wk, b)| b.tr_mul(wk))
            .collect();
        Trajectory::new(self.grid, values)
    }

    /// Trapezoidal `∫_0^T M̃(T-s) y(s) ds` with the system's `M̃`.
    pub fn memory_at_horizon(&self, y: &Trajectory) -> Result<DVector<f64>, VolterraError> {
        self.check_on_grid(y, self.n, "state")?;
        Ok(tabulated_memory(&self.tilde, y, self.grid.steps()))
    }
}

fn tabulated_memory(table: &KernelTable, y: &Trajectory, at: usize) -> DVector<f64> {
    if at == 0 || table.is_zero() {
        return DVector::zeros(y.dim());
    }
    let h = y.grid().dt();
    table.lagged_sum(at, y.values(), 0..at + 1, |j| if j == 0 || j == at { 0.5 } else { 1.0 }) * h
}

/// Forward solve of the memory system on `grid`.
pub fn solve_forward(
    sys: &MemorySystem,
    y0: &DVector<f64>,
    u: Option<&Trajectory>,
    grid: TimeGrid,
) -> Result<Trajectory, VolterraError> {
    Discretization::new(sys, grid)?.forward(y0, u)
}

/// Adjoint solve with terminal data `(w_T, z_T)`; returns `w` on `grid`.
pub fn solve_adjoint(
    sys: &MemorySystem,
    w_t: &DVector<f64>,
    z_t: &DVector<f64>,
    grid: TimeGrid,
) -> Result<Trajectory, VolterraError> {
    Discretization::new(sys, grid)?.adjoint(w_t, z_t)
}

/// Trapezoidal `∫_0^{at} K(at - s) y(s) ds`; `at` must be a grid node.
pub fn memory_functional(
    kernel: &ExpPolyKernel,
    y: &Trajectory,
    at: f64,
) -> Result<DVector<f64>, VolterraError> {
    if kernel.dim() != y.dim() {
        return Err(VolterraError::Dimension(format!(
            "kernel is {0}x{0} but trajectory has dimension {1}",
            kernel.dim(),
            y.dim()
        )));
    }
    let k = y.grid().index_of(at)?;
    let table = KernelTable::new(kernel, y.grid());
    Ok(tabulated_memory(&table, y, k))
}

/// `z(t_k) = ∫_0^{t_k} K(t_k - s) y(s) ds` at every node.
pub fn memory_trajectory(kernel: &ExpPolyKernel, y: &Trajectory) -> Result<Trajectory, VolterraError> {
    if kernel.dim() != y.dim() {
        return Err(VolterraError::Dimension(format!(
            "kernel is {0}x{0} but trajectory has dimension {1}",
            kernel.dim(),
            y.dim()
        )));
    }
    let table = KernelTable::new(kernel, y.grid());
    let values = (0..y.grid().len())
        .map(|k| tabulated_memory(&table, y, k))
        .collect();
    Trajectory::new(*y.grid(), values)
}

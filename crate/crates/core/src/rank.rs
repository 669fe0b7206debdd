//! Algebraic rank tests for memory-type null controllability.
//!
//! All three tests assemble a block matrix with `2n` rows whose columns are
//! `B`-images of a matrix recursion
//!
//! ```text
//! A_{i+1} = A·A_i + M_i(0),  M_{i+1} = M·A_i + M_i',  M̃_{i+1} = M̃·A_i + M̃_i'
//! ```
//!
//! started at `(A, M, M̃)`, and declare the test passed when the numerical
//! rank reaches `2n`. Conditions (i) and (ii) have unbounded column lists;
//! they are truncated once the recursion state falls into the span of the
//! earlier states, after which no new column can enlarge the column space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{exponents_match, ExpPolyKernel, KernelError};
use crate::volterra::MemorySystem;

pub const DEFAULT_RANK_TOL: f64 = 1e-12;
pub const DEFAULT_CLOSURE_TOL: f64 = 1e-10;
pub const DEFAULT_G_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("rank conditions need a constant control matrix B")]
    NonConstantInjector,
    #[error("condition (iii) needs constant kernels M and M̃")]
    NonConstantKernel,
    #[error("condition (ii) does not apply: {0}")]
    Inapplicable(KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "ii")]
    II,
    #[serde(rename = "iii")]
    III,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Holds,
    Fails,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankReport {
    pub condition: Condition,
    pub verdict: Verdict,
    pub rank: usize,
    pub target: usize,
    pub blocks_used: usize,
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    pub stop_reason: String,
    pub singular_values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub necessary_too: Option<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct RankOptions {
    /// Relative singular-value threshold.
    pub tol: f64,
    /// Relative residual under which a recursion state counts as dependent.
    pub closure_tol: f64,
    /// Residual tolerance for the `G_i` factorizations of condition (ii).
    pub g_tol: f64,
    /// Block-column cap; `None` picks `2·(state size) + 2`.
    pub max_blocks: Option<usize>,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_RANK_TOL,
            closure_tol: DEFAULT_CLOSURE_TOL,
            g_tol: DEFAULT_G_TOL,
            max_blocks: None,
        }
    }
}

/// Number of singular values above `tol·σ_max·max(rows, cols)`.
pub fn numerical_rank(mx: &DMatrix<f64>, tol: f64) -> (usize, Vec<f64>) {
    if mx.is_empty() {
        return (0, Vec::new());
    }
    let mut sv: Vec<f64> = mx.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv[0];
    let threshold = tol * smax * mx.nrows().max(mx.ncols()) as f64;
    let rank = sv.iter().filter(|&&s| s > threshold && s > 0.0).count();
    (rank, sv)
}

/// `(i, A_i, M_i(·), M̃_i(·))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursionState {
    pub index: usize,
    pub a: DMatrix<f64>,
    pub memory: ExpPolyKernel,
    pub memory_tilde: ExpPolyKernel,
}

impl RecursionState {
    pub fn initial(sys: &MemorySystem) -> Self {
        Self {
            index: 1,
            a: sys.a().clone(),
            memory: sys.memory().clone(),
            memory_tilde: sys.memory_tilde().clone(),
        }
    }

    pub fn step(&self, sys: &MemorySystem) -> Self {
        let a = sys.a() * &self.a + self.memory.eval(0.0);
        let memory = sys
            .memory()
            .right_multiply(&self.a)
            .and_then(|k| k.add(&self.memory.differentiate()))
            .expect("recursion state built from this system");
        let memory_tilde = sys
            .memory_tilde()
            .right_multiply(&self.a)
            .and_then(|k| k.add(&self.memory_tilde.differentiate()))
            .expect("recursion state built from this system");
        Self {
            index: self.index + 1,
            a,
            memory,
            memory_tilde,
        }
    }
}

pub fn recursion_step(state: &RecursionState, sys: &MemorySystem) -> RecursionState {
    state.step(sys)
}

/// Coordinates of a kernel in the fixed exponent/degree frame of another.
#[derive(Debug, Clone)]
struct KernelFrame {
    dim: usize,
    slots: Vec<(f64, usize)>,
}

impl KernelFrame {
    fn of(kernel: &ExpPolyKernel) -> Self {
        Self {
            dim: kernel.dim(),
            slots: kernel
                .terms()
                .iter()
                .map(|t| (t.exponent, t.coeffs.len()))
                .collect(),
        }
    }

    fn size(&self) -> usize {
        self.slots.iter().map(|(_, len)| len).sum::<usize>() * self.dim * self.dim
    }

    fn push(&self, kernel: &ExpPolyKernel, out: &mut Vec<f64>) {
        for &(a, len) in &self.slots {
            let term = kernel.terms().iter().find(|t| exponents_match(t.exponent, a));
            for k in 0..len {
                match term.and_then(|t| t.coeffs.get(k)) {
                    Some(c) => out.extend(c.iter()),
                    None => out.extend(std::iter::repeat_n(0.0, self.dim * self.dim)),
                }
            }
            debug_assert!(term.is_none_or(|t| t.coeffs.len() <= len));
        }
    }
}

/// Incremental orthonormal basis used to detect Krylov closure.
#[derive(Debug, Default)]
struct SpanTracker {
    basis: Vec<DVector<f64>>,
    tol: f64,
}

impl SpanTracker {
    fn new(tol: f64) -> Self {
        Self {
            basis: Vec::new(),
            tol,
        }
    }

    /// Adds `v` unless it lies in the current span; returns whether it was added.
    fn insert(&mut self, v: DVector<f64>) -> bool {
        let scale = v.norm();
        if scale == 0.0 {
            return false;
        }
        let mut r = v;
        for _ in 0..2 {
            for q in &self.basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let res = r.norm();
        if res <= self.tol * scale {
            return false;
        }
        self.basis.push(r / res);
        true
    }
}

fn constant_b(sys: &MemorySystem) -> Result<&DMatrix<f64>, RankError> {
    sys.injector().as_constant().ok_or(RankError::NonConstantInjector)
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape()).copy_from(bottom);
    out
}

fn hcat(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), b.shape()).copy_from(b);
        c += b.ncols();
    }
    out
}

fn report(
    condition: Condition,
    blocks: &[DMatrix<f64>],
    n: usize,
    tol: f64,
    verdict_if_short: Verdict,
    stop_reason: String,
) -> RankReport {
    let matrix = hcat(blocks);
    let (rank, singular_values) = numerical_rank(&matrix, tol);
    let verdict = if rank == 2 * n {
        Verdict::Holds
    } else {
        verdict_if_short
    };
    RankReport {
        condition,
        verdict,
        rank,
        target: 2 * n,
        blocks_used: blocks.len(),
        matrix,
        stop_reason,
        singular_values,
        necessary_too: None,
    }
}

/// Drives the block assembly shared by conditions (i) and (ii).
///
/// `column` maps the current (and previous) recursion state to the next
/// block column; `coordinates` gives the vector whose Krylov closure ends
/// the search.
fn krylov_search(
    condition: Condition,
    sys: &MemorySystem,
    opts: &RankOptions,
    state_size: usize,
    mut column: impl FnMut(&RecursionState, &DMatrix<f64>) -> DMatrix<f64>,
    coordinates: impl Fn(&RecursionState, &DMatrix<f64>) -> Vec<f64>,
) -> Result<RankReport, RankError> {
    let b = constant_b(sys)?;
    let n = sys.state_dim();
    let max_blocks = opts.max_blocks.unwrap_or(2 * state_size + 2).max(1);
    let mut blocks = vec![stack(b, &DMatrix::zeros(n, b.ncols()))];
    let mut span = SpanTracker::new(opts.closure_tol);
    let mut state = RecursionState::initial(sys);
    let mut previous_a = DMatrix::identity(n, n);
    loop {
        if blocks.len() >= max_blocks {
            let reason = format!("block cap {max_blocks} reached before rank or closure");
            return Ok(report(condition, &blocks, n, opts.tol, Verdict::Inconclusive, reason));
        }
        if !span.insert(DVector::from_vec(coordinates(&state, &previous_a))) {
            let reason = format!(
                "recursion state {} lies in the span of the previous states",
                state.index
            );
            return Ok(report(condition, &blocks, n, opts.tol, Verdict::Fails, reason));
        }
        blocks.push(column(&state, &previous_a));
        let matrix = hcat(&blocks);
        if numerical_rank(&matrix, opts.tol).0 == 2 * n {
            let reason = format!("rank {} reached at block {}", 2 * n, blocks.len());
            return Ok(report(condition, &blocks, n, opts.tol, Verdict::Holds, reason));
        }
        let next = state.step(sys);
        previous_a = std::mem::replace(&mut state, next).a;
    }
}

/// Condition (i): columns `[B; 0]`, `[A_i B; M̃_i(0) B]`, `i = 1, 2, ...`.
pub fn check_condition_i(sys: &MemorySystem, opts: &RankOptions) -> Result<RankReport, RankError> {
    let b = constant_b(sys)?.clone();
    let n = sys.state_dim();
    let m_frame = KernelFrame::of(sys.memory());
    let mt_frame = KernelFrame::of(sys.memory_tilde());
    let state_size = n * n + m_frame.size() + mt_frame.size();
    krylov_search(
        Condition::I,
        sys,
        opts,
        state_size,
        |s, _| stack(&(&s.a * &b), &(s.memory_tilde.eval(0.0) * &b)),
        |s, _| {
            let mut v: Vec<f64> = s.a.iter().copied().collect();
            m_frame.push(&s.memory, &mut v);
            mt_frame.push(&s.memory_tilde, &mut v);
            v
        },
    )
}

/// `G_i` with `M̃(0)·G_i = M̃^{(i)}(0)` for `i = 1..=count`.
pub fn g_sequence(kernel: &ExpPolyKernel, count: usize, tol: f64) -> Result<Vec<DMatrix<f64>>, RankError> {
    (1..=count)
        .map(|i| kernel.solve_g(i, tol).map_err(RankError::Inapplicable))
        .collect()
}

/// Verifies that every derivative of `M̃` at 0 factors through `M̃(0)`.
///
/// The derivatives span a finite-dimensional space, so it suffices to
/// check orders up to the first one whose coefficients are dependent on
/// the earlier ones.
fn check_g_applicable(kernel: &ExpPolyKernel, tol: f64, closure_tol: f64) -> Result<usize, RankError> {
    let frame = KernelFrame::of(kernel);
    let mut span = SpanTracker::new(closure_tol);
    let mut derivative = kernel.clone();
    let mut coords = Vec::new();
    frame.push(&derivative, &mut coords);
    span.insert(DVector::from_vec(coords));
    let mut order = 0;
    loop {
        order += 1;
        derivative = derivative.differentiate();
        kernel.solve_g(order, tol).map_err(RankError::Inapplicable)?;
        let mut coords = Vec::new();
        frame.push(&derivative, &mut coords);
        if !span.insert(DVector::from_vec(coords)) {
            return Ok(order);
        }
    }
}

/// `F_i = A_i + G_1 A_{i-1} + ... + G_{i-1} A_1 + G_i` for `i = 1..=count`.
pub fn f_sequence(sys: &MemorySystem, count: usize, g_tol: f64) -> Result<Vec<DMatrix<f64>>, RankError> {
    let n = sys.state_dim();
    let gs = g_sequence(sys.memory_tilde(), count, g_tol)?;
    let mut a_seq = vec![DMatrix::identity(n, n)]; // A_0 := I closes the sum on G_i
    let mut state = RecursionState::initial(sys);
    for _ in 0..count {
        a_seq.push(state.a.clone());
        state = state.step(sys);
    }
    Ok((1..=count)
        .map(|i| {
            let mut f = a_seq[i].clone();
            for k in 1..=i {
                f += &gs[k - 1] * &a_seq[i - k];
            }
            f
        })
        .collect())
}

/// Condition (ii): columns `[B; 0]`, `[A_1 B; B]`, `[A_{i+1} B; F_i B]`.
pub fn check_condition_ii(sys: &MemorySystem, opts: &RankOptions) -> Result<RankReport, RankError> {
    let b = constant_b(sys)?.clone();
    let n = sys.state_dim();
    check_g_applicable(sys.memory_tilde(), opts.g_tol, opts.closure_tol)?;
    let m_frame = KernelFrame::of(sys.memory());
    let mt_frame = KernelFrame::of(sys.memory_tilde());
    // joint state (A_i, M_i, M̃_i, A_{i-1}); F_{i-1} is a linear image of it
    let state_size = 2 * n * n + m_frame.size() + mt_frame.size();
    let mt = sys.memory_tilde().clone();
    let mut g: Vec<DMatrix<f64>> = Vec::new();
    let mut a_hist: Vec<DMatrix<f64>> = vec![DMatrix::identity(n, n)];
    krylov_search(
        Condition::II,
        sys,
        opts,
        state_size,
        |s, _| {
            // s.index = i; pair A_i with F_{i-1} (F_0 = I)
            let i = s.index;
            a_hist.push(s.a.clone());
            let f_prev = if i == 1 {
                DMatrix::identity(n, n)
            } else {
                while g.len() < i - 1 {
                    let order = g.len() + 1;
                    g.push(mt.solve_g(order, opts.g_tol).expect("applicability checked up front"));
                }
                let mut f = a_hist[i - 1].clone();
                for k in 1..i {
                    f += &g[k - 1] * &a_hist[i - 1 - k];
                }
                f
            };
            stack(&(&s.a * &b), &(f_prev * &b))
        },
        |s, prev_a| {
            let mut v: Vec<f64> = s.a.iter().copied().collect();
            m_frame.push(&s.memory, &mut v);
            mt_frame.push(&s.memory_tilde, &mut v);
            v.extend(prev_a.iter());
            v
        },
    )
}

/// Condition (iii) for constant kernels: the fixed matrix with `2n + 2`
/// block columns `[B; 0]`, `[A_i B; A_{i-1} B]` (`A_0 = I`, `i = 1..=2n+1`).
pub fn check_condition_iii(sys: &MemorySystem, tol: f64) -> Result<RankReport, RankError> {
    let b = constant_b(sys)?;
    if !sys.memory().is_constant() || !sys.memory_tilde().is_constant() {
        return Err(RankError::NonConstantKernel);
    }
    let n = sys.state_dim();
    let m = sys.memory().eval(0.0);
    let mt = sys.memory_tilde().eval(0.0);
    let mut a_seq = vec![DMatrix::identity(n, n), sys.a().clone()];
    let mut m_i = m.clone();
    for i in 1..=2 * n {
        let next_a = sys.a() * &a_seq[i] + &m_i;
        m_i = &m * &a_seq[i];
        a_seq.push(next_a);
    }
    let mut blocks = vec![stack(b, &DMatrix::zeros(n, b.ncols()))];
    for i in 1..=2 * n + 1 {
        blocks.push(stack(&(&a_seq[i] * b), &(&a_seq[i - 1] * b)));
    }
    let mut rep = report(
        Condition::III,
        &blocks,
        n,
        tol,
        Verdict::Fails,
        format!("fixed {} block columns", 2 * n + 2),
    );
    rep.necessary_too = Some(numerical_rank(&mt, tol).0 == n);
    Ok(rep)
}

//! Memory-type null controllability for linear systems with memory.
//!
//! Systems of the form `y' = A y + ∫_0^t M(t-s) y(s) ds + B(t) u` are
//! steered so that both `y(T)` and the accumulated memory
//! `∫_0^T M̃(T-s) y(s) ds` vanish. The crate provides
//!
//! * [`kernels`]: exact algebra on exponential-polynomial kernels,
//! * [`volterra`]: trapezoidal forward/adjoint solvers and memory functionals,
//! * [`rank`]: algebraic rank tests for controllability,
//! * [`hum`]: duality-based control synthesis by conjugate gradient,
//! * [`parabolic`]: a 1-D heat equation with memory and a moving control window.

pub mod hum;
pub mod kernels;
pub mod parabolic;
pub mod rank;
pub mod volterra;

pub use hum::{
    gramian_apply, objective, objective_gradient, observability_ratio, synthesize, DualPoint, Hum, HumError,
    SynthesisOptions, SynthesisResult,
};
pub use kernels::{ExpPolyKernel, ExpPolyTerm, KernelError, KernelLiteral};
pub use volterra::{
    memory_functional, memory_trajectory, solve_adjoint, solve_forward, Discretization, Injector,
    MemorySystem, TimeGrid, Trajectory, VolterraError,
};
pub use parabolic::{
    assemble_system, coverage_check, discretize_laplacian, moving_support_injector, Coverage, MemoryVariant,
    Mesh1D, MovingWindow, ParabolicError,
};
pub use rank::{
    check_condition_i, check_condition_ii, check_condition_iii, numerical_rank, Condition, RankError,
    RankOptions, RankReport, RecursionState, Verdict,
};

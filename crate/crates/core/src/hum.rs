//! Control synthesis by duality.
//!
//! A pair `p = (w_T, z_T)` of terminal adjoint data defines the adjoint
//! solution `w` and the control `u = B(·)ᵀ w`. The functional
//!
//! ```text
//! J(p) = ½ ∫_0^T |B(t)ᵀ w(t)|² dt + (w(0), y0)
//! ```
//!
//! has gradient `(y(T), -∫_0^T M̃(T-s) y(s) ds)` where `y` is driven by that
//! control, so a minimizer steers both targets to zero. [`synthesize`]
//! minimizes the Tikhonov-regularized `J + ε/2 |p|²` by conjugate gradient.
//!
//! All quantities use the exact discrete adjoint of the forward scheme, so
//! the discrete Gramian is symmetric positive semidefinite to round-off and
//! the reported gradient is the true gradient of the discrete functional.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::volterra::{DiscreteAdjoint, Discretization, MemorySystem, TimeGrid, Trajectory, VolterraError};

pub const DEFAULT_CG_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum HumError {
    #[error(transparent)]
    Solver(#[from] VolterraError),
    #[error("regularization must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("dual point has dimension {got}, system has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("dual point has non-finite entries")]
    NonFinite,
    #[error("observability ratio needs a nonzero dual point")]
    ZeroDualPoint,
}

/// Terminal data `(w_T, z_T)` of the adjoint system.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub w_t: DVector<f64>,
    pub z_t: DVector<f64>,
}

impl DualPoint {
    pub fn new(w_t: DVector<f64>, z_t: DVector<f64>) -> Result<Self, HumError> {
        if w_t.len() != z_t.len() {
            return Err(HumError::Dimension {
                expected: w_t.len(),
                got: z_t.len(),
            });
        }
        if w_t.iter().chain(z_t.iter()).any(|v| !v.is_finite()) {
            return Err(HumError::NonFinite);
        }
        Ok(Self { w_t, z_t })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            w_t: DVector::zeros(n),
            z_t: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_t.len()
    }

    /// `[w_T; z_T]`.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.dim();
        DVector::from_fn(2 * n, |i, _| if i < n { self.w_t[i] } else { self.z_t[i - n] })
    }

    pub fn from_stacked(v: &DVector<f64>) -> Self {
        let n = v.len() / 2;
        Self {
            w_t: v.rows(0, n).into_owned(),
            z_t: v.rows(n, n).into_owned(),
        }
    }

    pub fn dot(&self, other: &DualPoint) -> f64 {
        self.w_t.dot(&other.w_t) + self.z_t.dot(&other.z_t)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.w_t.iter().chain(self.z_t.iter()).all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthesisOptions {
    pub epsilon: f64,
    pub cg_tol: f64,
    /// `None` means `10·2n`.
    pub cg_max: Option<usize>,
}

impl SynthesisOptions {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            cg_tol: DEFAULT_CG_TOL,
            cg_max: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisResult {
    #[serde(skip)]
    pub control: Trajectory,
    #[serde(skip)]
    pub state: Trajectory,
    #[serde(skip)]
    pub dual: DualPoint,
    pub terminal_state_norm: f64,
    pub memory_norm: f64,
    pub cost: f64,
    pub iterations: usize,
    pub epsilon: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

/// Duality machinery for one system on one grid.
#[derive(Debug, Clone)]
pub struct Hum {
    disc: Discretization,
}

impl Hum {
    pub fn new(sys: &MemorySystem, grid: TimeGrid) -> Result<Self, HumError> {
        Ok(Self {
            disc: Discretization::new(sys, grid)?,
        })
    }

    pub fn from_discretization(disc: Discretization) -> Self {
        Self { disc }
    }

    pub fn discretization(&self) -> &Discretization {
        &self.disc
    }

    fn check(&self, p: &DualPoint) -> Result<(), HumError> {
        if p.dim() != self.disc.state_dim() {
            return Err(HumError::Dimension {
                expected: self.disc.state_dim(),
                got: p.dim(),
            });
        }
        Ok(())
    }

    fn check_state(&self, y0: &DVector<f64>) -> Result<(), HumError> {
        if y0.len() != self.disc.state_dim() {
            return Err(HumError::Dimension {
                expected: self.disc.state_dim(),
                got: y0.len(),
            });
        }
        Ok(())
    }

    pub fn adjoint(&self, p: &DualPoint) -> Result<DiscreteAdjoint, HumError> {
        self.check(p)?;
        Ok(self.disc.discrete_adjoint(&p.w_t, &p.z_t)?)
    }

    /// `u = B(·)ᵀ w` for the adjoint started at `p`.
    pub fn control(&self, p: &DualPoint) -> Result<Trajectory, HumError> {
        let adj = self.adjoint(p)?;
        Ok(self.disc.control_from_adjoint(&adj.weights)?)
    }

    /// `(y(T), -∫ M̃(T-s) y(s) ds)`.
    fn targets(&self, y: &Trajectory) -> Result<DualPoint, HumError> {
        Ok(DualPoint {
            w_t: y.last().clone(),
            z_t: -self.disc.memory_at_horizon(y)?,
        })
    }

    pub fn objective(&self, y0: &DVector<f64>, p: &DualPoint) -> Result<f64, HumError> {
        self.check_state(y0)?;
        let adj = self.adjoint(p)?;
        let u = self.disc.control_from_adjoint(&adj.weights)?;
        Ok(0.5 * u.squared_l2() + adj.initial.dot(y0))
    }

    pub fn gradient(&self, y0: &DVector<f64>, p: &DualPoint) -> Result<DualPoint, HumError> {
        self.check_state(y0)?;
        let u = self.control(p)?;
        let y = self.disc.forward(y0, Some(&u))?;
        self.targets(&y)
    }

    /// `Λp`: the targets reached from rest under `u = B(·)ᵀ w(p)`.
    pub fn gramian_apply(&self, p: &DualPoint) -> Result<DualPoint, HumError> {
        self.gradient(&DVector::zeros(p.dim()), p)
    }

    /// `|w(0)|² / ∫|B(t)ᵀ w(t)|² dt`, infinite when the denominator vanishes.
    pub fn observability_ratio(&self, p: &DualPoint) -> Result<f64, HumError> {
        self.check(p)?;
        if p.is_zero() {
            return Err(HumError::ZeroDualPoint);
        }
        let adj = self.adjoint(p)?;
        let den = self.disc.control_from_adjoint(&adj.weights)?.squared_l2();
        if den <= f64::MIN_POSITIVE {
            return Ok(f64::INFINITY);
        }
        Ok(adj.initial.norm_squared() / den)
    }

    /// Solves `(Λ + εI)p = -(y_free(T), -∫M̃ y_free)` by conjugate gradient
    /// from `p = 0` and simulates the resulting control.
    pub fn synthesize(&self, y0: &DVector<f64>, opts: &SynthesisOptions) -> Result<SynthesisResult, HumError> {
        self.check_state(y0)?;
        let eps = opts.epsilon;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(HumError::InvalidEpsilon(eps));
        }
        let n = self.disc.state_dim();
        let cg_max = opts.cg_max.unwrap_or(20 * n);

        let free = self.disc.forward(y0, None)?;
        let b = self.targets(&free)?.stacked();
        let b_norm = b.norm();

        let mut x = DVector::zeros(2 * n);
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut converged = true;
        if b_norm > 0.0 {
            converged = false;
            let mut r = -&b;
            let mut dir = r.clone();
            let mut rr = r.norm_squared();
            history.push(1.0);
            while iterations < cg_max {
                let ad = self.gramian_apply(&DualPoint::from_stacked(&dir))?.stacked() + &dir * eps;
                let curvature = dir.dot(&ad);
                if curvature.is_nan() || curvature <= 0.0 {
                    break;
                }
                let alpha = rr / curvature;
                x.axpy(alpha, &dir, 1.0);
                r.axpy(-alpha, &ad, 1.0);
                iterations += 1;
                let rr_next = r.norm_squared();
                let rel = rr_next.sqrt() / b_norm;
                history.push(rel);
                if rel <= opts.cg_tol {
                    converged = true;
                    break;
                }
                dir = &r + &dir * (rr_next / rr);
                rr = rr_next;
            }
        } else {
            history.push(0.0);
        }

        let dual = DualPoint::from_stacked(&x);
        let control = self.control(&dual)?;
        let state = self.disc.forward(y0, Some(&control))?;
        let reached = self.targets(&state)?;
        Ok(SynthesisResult {
            terminal_state_norm: reached.w_t.norm(),
            memory_norm: reached.z_t.norm(),
            cost: control.squared_l2(),
            iterations,
            epsilon: eps,
            converged,
            residual_history: history,
            control,
            state,
            dual,
        })
    }
}

pub fn objective(sys: &MemorySystem, y0: &DVector<f64>, p: &DualPoint, grid: TimeGrid) -> Result<f64, HumError> {
    Hum::new(sys, grid)?.objective(y0, p)
}

pub fn objective_gradient(
    sys: &MemorySystem,
    y0: &DVector<f64>,
    p: &DualPoint,
    grid: TimeGrid,
) -> Result<DualPoint, HumError> {
    Hum::new(sys, grid)?.gradient(y0, p)
}

pub fn gramian_apply(sys: &MemorySystem, p: &DualPoint, grid: TimeGrid) -> Result<DualPoint, HumError> {
    Hum::new(sys, grid)?.gramian_apply(p)
}

pub fn synthesize(
    sys: &MemorySystem,
    y0: &DVector<f64>,
    grid: TimeGrid,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, HumError> {
    Hum::new(sys, grid)?.synthesize(y0, opts)
}

pub fn observability_ratio(sys: &MemorySystem, p: &DualPoint, grid: TimeGrid) -> Result<f64, HumError> {
    Hum::new(sys, grid)?.observability_ratio(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ExpPolyKernel;
    use crate::rank::{check_condition_iii, Verdict};
    use crate::volterra::Injector;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn p1(w: f64, z: f64) -> DualPoint {
        DualPoint::new(v1(w), v1(z)).unwrap()
    }

    fn scalar(mt: f64) -> MemorySystem {
        MemorySystem::new(
            m1(0.0),
            ExpPolyKernel::zero(1),
            ExpPolyKernel::constant(m1(mt)),
            Injector::Constant(m1(1.0)),
            1.0,
        )
        .unwrap()
    }

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(1.0, steps).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> ExpPolyKernel {
        let a = rng.gen_range(-1.0..0.5);
        let coeffs = (0..rng.gen_range(1..=2)).map(|_| random_matrix(rng, n, n)).collect();
        ExpPolyKernel::exp_poly(a, coeffs).unwrap()
    }

    fn random_system(rng: &mut ChaCha8Rng) -> MemorySystem {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=2);
        let b = random_matrix(rng, n, m);
        let injector = if rng.gen_bool(0.5) {
            Injector::Constant(b)
        } else {
            Injector::time_varying(n, m, move |t| &b * (1.0 + 0.5 * t))
        };
        MemorySystem::new(random_matrix(rng, n, n), random_kernel(rng, n), random_kernel(rng, n), injector, 1.0)
            .unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> DualPoint {
        DualPoint::new(
            DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        )
        .unwrap()
    }

    #[test]
    fn objective_examples() {
        let sys = scalar(0.0);
        assert_eq!(objective(&sys, &v1(1.0), &p1(0.0, 0.0), grid(100)).unwrap(), 0.0);
        let j = objective(&sys, &v1(1.0), &p1(1.0, 0.0), grid(100)).unwrap();
        assert!((j - 1.5).abs() < 1e-12, "{j}");
        let j = objective(&scalar(1.0), &v1(0.0), &p1(0.0, 1.0), grid(1000)).unwrap();
        assert!((j - 1.0 / 6.0).abs() < 1e-5, "{j}");
    }

    #[test]
    fn gradient_examples() {
        let sys = scalar(1.0);
        let g = objective_gradient(&sys, &v1(1.0), &p1(0.0, 0.0), grid(100)).unwrap();
        assert!((g.w_t[0] - 1.0).abs() < 1e-12);
        assert!((g.z_t[0] + 1.0).abs() < 1e-12);
        let g = objective_gradient(&sys, &v1(0.0), &p1(0.0, 0.0), grid(100)).unwrap();
        assert!(g.is_zero());
        assert!(gramian_apply(&sys, &DualPoint::zeros(1), grid(10)).unwrap().is_zero());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let sys = random_system(&mut rng);
            let n = sys.state_dim();
            let hum = Hum::new(&sys, grid(1000)).unwrap();
            let y0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let p = random_point(&mut rng, n);
            let g = hum.gradient(&y0, &p).unwrap().stacked();
            let x = p.stacked();
            let step = 1e-6;
            let fd = DVector::from_fn(2 * n, |i, _| {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus[i] += step;
                minus[i] -= step;
                let jp = hum.objective(&y0, &DualPoint::from_stacked(&plus)).unwrap();
                let jm = hum.objective(&y0, &DualPoint::from_stacked(&minus)).unwrap();
                (jp - jm) / (2.0 * step)
            });
            let rel = (&fd - &g).norm() / g.norm().max(1e-12);
            assert!(rel < 1e-4, "relative error {rel}");
        }
    }

    #[test]
    fn gramian_is_symmetric_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..6 {
            let sys = random_system(&mut rng);
            let n = sys.state_dim();
            let hum = Hum::new(&sys, grid(200)).unwrap();
            let p = random_point(&mut rng, n);
            let q = random_point(&mut rng, n);
            let lp = hum.gramian_apply(&p).unwrap();
            let lq = hum.gramian_apply(&q).unwrap();
            assert!((lp.dot(&q) - p.dot(&lq)).abs() < 1e-8);
            let quad = lp.dot(&p);
            let energy = hum.control(&p).unwrap().squared_l2();
            assert!(quad >= -1e-12);
            assert!((quad - energy).abs() < 1e-8);
            let j0 = hum.objective(&DVector::zeros(n), &p).unwrap();
            assert!((quad - 2.0 * j0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_initial_state_needs_no_control() {
        let res = synthesize(&scalar(1.0), &v1(0.0), grid(100), &SynthesisOptions::new(1e-8)).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
        assert_eq!(res.cost, 0.0);
        assert_eq!(res.terminal_state_norm, 0.0);
        assert_eq!(res.memory_norm, 0.0);
        assert!(res.control.values().iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn classical_control_is_constant() {
        let res = synthesize(&scalar(0.0), &v1(1.0), grid(1000), &SynthesisOptions::new(1e-10)).unwrap();
        assert!(res.converged);
        let dev = res.control.values().iter().map(|u| (u[0] + 1.0).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-3, "{dev}");
        assert!((res.cost - 1.0).abs() < 1e-6);
        assert!(res.terminal_state_norm < 1e-8);
    }

    #[test]
    fn memory_control_is_affine() {
        let res = synthesize(&scalar(1.0), &v1(1.0), grid(1000), &SynthesisOptions::new(1e-10)).unwrap();
        assert!(res.converged);
        let g = res.control.grid();
        let dev = res
            .control
            .values()
            .iter()
            .enumerate()
            .map(|(k, u)| (u[0] - (6.0 * g.node(k) - 4.0)).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-2, "{dev}");
        assert!((res.cost - 4.0).abs() < 0.04, "{}", res.cost);
        assert!(res.terminal_state_norm < 1e-8 && res.memory_norm < 1e-8);
    }

    #[test]
    fn residuals_shrink_with_epsilon() {
        let hum = Hum::new(&scalar(1.0), grid(500)).unwrap();
        let mut last = (f64::INFINITY, f64::INFINITY);
        for eps in [1e-4, 1e-6, 1e-8] {
            let res = hum.synthesize(&v1(1.0), &SynthesisOptions::new(eps)).unwrap();
            assert!(res.terminal_state_norm <= last.0 && res.memory_norm <= last.1);
            last = (res.terminal_state_norm, res.memory_norm);
        }
    }

    #[test]
    fn synthesis_residual_is_regularization_times_dual() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sys = random_system(&mut rng);
        let n = sys.state_dim();
        let hum = Hum::new(&sys, grid(300)).unwrap();
        let y0 = DVector::from_element(n, 1.0);
        let eps = 1e-3;
        let res = hum.synthesize(&y0, &SynthesisOptions::new(eps)).unwrap();
        assert!(res.converged);
        let g = hum.gradient(&y0, &res.dual).unwrap().stacked();
        assert!((g + res.dual.stacked() * eps).norm() < 1e-8);
    }

    #[test]
    fn observability_ratio_examples() {
        let r = observability_ratio(&scalar(0.0), &p1(1.0, 0.0), grid(100)).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let no_b = MemorySystem::new(
            m1(0.0),
            ExpPolyKernel::zero(1),
            ExpPolyKernel::zero(1),
            Injector::Constant(m1(0.0)),
            1.0,
        )
        .unwrap();
        assert_eq!(observability_ratio(&no_b, &p1(1.0, 0.0), grid(10)).unwrap(), f64::INFINITY);
        assert!(matches!(
            observability_ratio(&no_b, &p1(0.0, 0.0), grid(10)),
            Err(HumError::ZeroDualPoint)
        ));
    }

    #[test]
    fn observability_ratio_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = random_system(&mut rng);
        let hum = Hum::new(&sys, grid(100)).unwrap();
        let p = random_point(&mut rng, sys.state_dim());
        let base = hum.observability_ratio(&p).unwrap();
        for alpha in [2.0, -0.25, 1024.0] {
            let scaled = DualPoint::from_stacked(&(p.stacked() * alpha));
            assert_eq!(hum.observability_ratio(&scaled).unwrap(), base);
        }
        let scaled = DualPoint::from_stacked(&(p.stacked() * -3.0));
        assert!((hum.observability_ratio(&scaled).unwrap() / base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let hum = Hum::new(&scalar(1.0), grid(10)).unwrap();
        assert!(matches!(
            hum.synthesize(&v1(1.0), &SynthesisOptions::new(0.0)),
            Err(HumError::InvalidEpsilon(_))
        ));
        assert!(matches!(
            hum.objective(&DVector::zeros(2), &p1(0.0, 0.0)),
            Err(HumError::Dimension { .. })
        ));
        assert!(matches!(
            DualPoint::new(v1(f64::NAN), v1(0.0)),
            Err(HumError::NonFinite)
        ));
    }

    #[test]
    fn serialized_result_fields() {
        let res = synthesize(&scalar(1.0), &v1(1.0), grid(50), &SynthesisOptions::new(1e-6)).unwrap();
        let v = serde_json::to_value(&res).unwrap();
        for key in ["terminal_state_norm", "memory_norm", "cost", "iterations", "epsilon", "converged", "residual_history"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v.get("control").is_none());
    }

    fn constant_system(a: DMatrix<f64>, m: DMatrix<f64>, mt: DMatrix<f64>, b: DMatrix<f64>) -> MemorySystem {
        MemorySystem::new(a, ExpPolyKernel::constant(m), ExpPolyKernel::constant(mt), Injector::Constant(b), 1.0).unwrap()
    }

    #[test]
    fn controllable_verdicts_are_synthesizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut seen = 0;
        while seen < 10 {
            let n = rng.gen_range(1..=2);
            let m = rng.gen_range(1..=2);
            let sys = constant_system(
                random_matrix(&mut rng, n, n) * 2.0,
                random_matrix(&mut rng, n, n) * 2.0,
                random_matrix(&mut rng, n, n) * 2.0,
                random_matrix(&mut rng, n, m) * 2.0,
            );
            if check_condition_iii(&sys, 1e-12).unwrap().verdict != Verdict::Holds {
                continue;
            }
            let y0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let res = synthesize(&sys, &y0, grid(200), &SynthesisOptions::new(1e-9)).unwrap();
            let tol = 1e-4 * y0.norm();
            assert!(res.terminal_state_norm <= tol && res.memory_norm <= tol, "{res:?}");
            seen += 1;
        }
    }

    #[test]
    fn uncontrollable_verdicts_stagnate() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..10 {
            // second component evolves on its own
            let diag = |rng: &mut ChaCha8Rng| {
                DMatrix::from_diagonal(&DVector::from_fn(2, |_, _| rng.gen_range(0.5..2.0)))
            };
            let mut b = DMatrix::zeros(2, 1);
            b[(0, 0)] = 1.0;
            let sys = constant_system(diag(&mut rng), diag(&mut rng), diag(&mut rng), b);
            let rep = check_condition_iii(&sys, 1e-12).unwrap();
            assert_eq!(rep.verdict, Verdict::Fails);
            assert_eq!(rep.necessary_too, Some(true));
            let y0 = DVector::from_fn(2, |_, _| rng.gen_range(0.5..1.0));
            let res = synthesize(&sys, &y0, grid(200), &SynthesisOptions::new(1e-9)).unwrap();
            let residual = res.terminal_state_norm.hypot(res.memory_norm);
            assert!(residual > 1e-2 * y0.norm(), "{residual}");
        }
    }
}

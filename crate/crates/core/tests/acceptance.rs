//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use memoctrl::rank::{f_sequence, RecursionState};
use memoctrl::{
    assemble_system, check_condition_i, check_condition_ii, check_condition_iii, coverage_check, Discretization,
    DualPoint, ExpPolyKernel, ExpPolyTerm, Hum, Injector, MemorySystem, MemoryVariant, Mesh1D, MovingWindow,
    RankOptions, SynthesisOptions, TimeGrid, Trajectory, Verdict,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

impl Outcome {
    fn gate(id: &'static str, pass: bool, detail: String) -> Self {
        Self { id, pass, gating: true, detail }
    }

    fn info(id: &'static str, pass: bool, detail: String) -> Self {
        Self { id, pass, gating: false, detail }
    }
}

fn m1(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn scalar_system(a: f64, m: f64, mt: f64, b: f64) -> MemorySystem {
    MemorySystem::new(
        m1(a),
        ExpPolyKernel::constant(m1(m)),
        ExpPolyKernel::constant(m1(mt)),
        Injector::Constant(m1(b)),
        1.0,
    )
    .unwrap()
}

fn constant_system(a: DMatrix<f64>, m: DMatrix<f64>, mt: DMatrix<f64>, b: DMatrix<f64>) -> MemorySystem {
    MemorySystem::new(
        a,
        ExpPolyKernel::constant(m),
        ExpPolyKernel::constant(mt),
        Injector::Constant(b),
        1.0,
    )
    .unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, bound: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-bound..=bound))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0))
}

/// Up to two exponents, degree ≤ 2, entries in [-2, 2].
fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> ExpPolyKernel {
    let terms = (0..rng.gen_range(1..=2))
        .map(|_| ExpPolyTerm {
            exponent: rng.gen_range(-2.0..=2.0),
            coeffs: (0..rng.gen_range(1..=3)).map(|_| random_matrix(rng, n, n, 2.0)).collect(),
        })
        .collect();
    ExpPolyKernel::new(n, terms).unwrap()
}

fn random_system(rng: &mut ChaCha8Rng, max_n: usize) -> MemorySystem {
    let n = rng.gen_range(1..=max_n);
    let m = rng.gen_range(1..=2);
    MemorySystem::new(
        random_matrix(rng, n, n, 2.0),
        random_kernel(rng, n),
        random_kernel(rng, n),
        Injector::Constant(random_matrix(rng, n, m, 2.0)),
        1.0,
    )
    .unwrap()
}

fn smooth_control(rng: &mut ChaCha8Rng, m: usize, grid: TimeGrid) -> Trajectory {
    let coef: Vec<(f64, f64, f64)> = (0..m)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..3.0)))
        .collect();
    Trajectory::from_fn(grid, |t| {
        DVector::from_iterator(m, coef.iter().map(|(a, b, f)| a * (f * t).sin() + b * (f * t).cos()))
    })
    .unwrap()
}

fn grid(steps: usize) -> TimeGrid {
    TimeGrid::new(1.0, steps).unwrap()
}

fn within(elapsed: Duration, limit: f64) -> bool {
    elapsed.as_secs_f64() < limit
}

fn volterra_oracle() -> Vec<Outcome> {
    let start = Instant::now();
    let sys = scalar_system(0.0, 1.0, 0.0, 1.0);
    let exact = 1f64.cosh();
    let err = |steps| {
        let y = Discretization::new(&sys, grid(steps)).unwrap().forward(&v1(1.0), None).unwrap();
        (y.last()[0] - exact).abs()
    };
    let errors = [err(250), err(500), err(1000)];
    let elapsed = start.elapsed();
    let rel = errors[2] / exact;
    let orders = [(errors[0] / errors[1]).log2(), (errors[1] / errors[2]).log2()];
    let pass = rel <= 1e-5 && orders.iter().all(|p| (1.8..=2.2).contains(p)) && within(elapsed, 1.0);
    vec![Outcome::gate(
        "1 volterra oracle",
        pass,
        format!("rel err {rel:.2e} at dt=1e-3, orders {:.3}/{:.3}, {:.3}s", orders[0], orders[1], elapsed.as_secs_f64()),
    )]
}

fn duality_residual(sys: &MemorySystem, steps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sys.state_dim();
    let g = grid(steps);
    let y0 = random_vector(&mut rng, n);
    let w_t = random_vector(&mut rng, n);
    let z_t = random_vector(&mut rng, n);
    let u = smooth_control(&mut rng, sys.control_dim(), g);
    let disc = Discretization::new(sys, g).unwrap();
    let y = disc.forward(&y0, Some(&u)).unwrap();
    let w = disc.adjoint(&w_t, &z_t).unwrap();
    let bw = disc.control_from_adjoint(&w).unwrap();
    let mem = disc.memory_at_horizon(&y).unwrap();
    (w_t.dot(y.last()) - w.value(0).dot(&y0) - z_t.dot(&mem) - bw.inner(&u)).abs()
}

fn duality_identity() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst = 0.0f64;
    let mut ratios = (f64::INFINITY, f64::NEG_INFINITY);
    let mut failures = 0;
    for seed in 0..20 {
        let sys = random_system(&mut rng, 4);
        let coarse = duality_residual(&sys, 1000, seed);
        let fine = duality_residual(&sys, 2000, seed);
        let ratio = coarse / fine;
        worst = worst.max(coarse);
        ratios = (ratios.0.min(ratio), ratios.1.max(ratio));
        if !(coarse <= 1e-4 && (3.5..=4.5).contains(&ratio)) {
            failures += 1;
        }
    }
    vec![Outcome::gate(
        "2 duality identity",
        failures == 0,
        format!(
            "20 systems, max residual {worst:.2e} at dt=1e-3, halving ratios in [{:.3}, {:.3}], {failures} outside",
            ratios.0, ratios.1
        ),
    )]
}

fn exact_control_oracle() -> Vec<Outcome> {
    let start = Instant::now();
    let sys = scalar_system(0.0, 0.0, 1.0, 1.0);
    let hum = Hum::new(&sys, grid(1000)).unwrap();
    let res = hum.synthesize(&v1(1.0), &SynthesisOptions::new(1e-10)).unwrap();
    let elapsed = start.elapsed();
    let g = res.control.grid();
    let sup = res
        .control
        .values()
        .iter()
        .enumerate()
        .map(|(k, u)| (u[0] - (6.0 * g.node(k) - 4.0)).abs())
        .fold(0.0, f64::max);
    let cost_rel = (res.cost - 4.0).abs() / 4.0;
    let pass = sup <= 1e-2
        && cost_rel <= 0.01
        && res.terminal_state_norm <= 1e-6
        && res.memory_norm <= 1e-6
        && within(elapsed, 5.0);
    vec![Outcome::gate(
        "3 exact control oracle",
        pass,
        format!(
            "sup|u-(6t-4)| {sup:.2e}, cost {:.6}, |y(T)| {:.2e}, |memory| {:.2e}, {} CG its, {:.3}s",
            res.cost,
            res.terminal_state_norm,
            res.memory_norm,
            res.iterations,
            elapsed.as_secs_f64()
        ),
    )]
}

fn gradient_correctness() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let sys = random_system(&mut rng, 3);
        let n = sys.state_dim();
        let hum = Hum::new(&sys, grid(1000)).unwrap();
        let y0 = random_vector(&mut rng, n);
        let p = DualPoint::new(random_vector(&mut rng, n), random_vector(&mut rng, n)).unwrap();
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
        worst = worst.max((&fd - &g).norm() / g.norm());
    }
    vec![Outcome::gate(
        "4 gradient correctness",
        worst <= 1e-4,
        format!("20 systems, max relative error {worst:.2e}"),
    )]
}

fn rank_conditions() -> Vec<Outcome> {
    let start = Instant::now();
    let opts = RankOptions::default();
    let mut out = Vec::new();

    let fib = scalar_system(1.0, 1.0, 1.0, 1.0);
    let rep = check_condition_iii(&fib, opts.tol).unwrap();
    let expected = DMatrix::from_row_slice(2, 4, &[1., 1., 2., 3., 0., 1., 1., 2.]);
    out.push(Outcome::gate(
        "5a fibonacci condition iii",
        rep.verdict == Verdict::Holds && rep.matrix == expected,
        format!("verdict {:?}, rank {}, matrix {:?}", rep.verdict, rep.rank, rep.matrix.as_slice()),
    ));

    let zero_b = scalar_system(1.0, 1.0, 1.0, 0.0);
    let verdicts = [
        check_condition_i(&zero_b, &opts).unwrap().verdict,
        check_condition_ii(&zero_b, &opts).unwrap().verdict,
        check_condition_iii(&zero_b, opts.tol).unwrap().verdict,
    ];
    out.push(Outcome::gate(
        "5b B = 0 fails",
        verdicts.iter().all(|v| *v == Verdict::Fails),
        format!("verdicts {verdicts:?}"),
    ));

    let sys = constant_system(
        DMatrix::zeros(2, 2),
        DMatrix::zeros(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
    );
    let reps = [
        check_condition_i(&sys, &opts).unwrap(),
        check_condition_ii(&sys, &opts).unwrap(),
        check_condition_iii(&sys, opts.tol).unwrap(),
    ];
    out.push(Outcome::gate(
        "5c n=2 single input fails",
        reps.iter().all(|r| r.verdict == Verdict::Fails),
        format!(
            "verdicts {:?}, ranks {:?}",
            reps.iter().map(|r| r.verdict).collect::<Vec<_>>(),
            reps.iter().map(|r| r.rank).collect::<Vec<_>>()
        ),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut disagreements = 0;
    let mut holds = 0;
    let mut f_mismatch = 0;
    for _ in 0..20 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=2);
        let mt = loop {
            let c = random_matrix(&mut rng, n, n, 2.0);
            if c.determinant().abs() > 1e-3 {
                break c;
            }
        };
        let sys = constant_system(
            random_matrix(&mut rng, n, n, 2.0),
            random_matrix(&mut rng, n, n, 2.0),
            mt,
            random_matrix(&mut rng, n, m, 2.0),
        );
        let v1 = check_condition_i(&sys, &opts).unwrap().verdict;
        let v2 = check_condition_ii(&sys, &opts).unwrap().verdict;
        let v3 = check_condition_iii(&sys, opts.tol).unwrap().verdict;
        if v1 != v3 || v2 != v3 {
            disagreements += 1;
        }
        if v3 == Verdict::Holds {
            holds += 1;
        }
        let fs = f_sequence(&sys, 2 * n + 1, opts.g_tol).unwrap();
        let mut state = RecursionState::initial(&sys);
        for f in &fs {
            if f != &state.a {
                f_mismatch += 1;
            }
            state = state.step(&sys);
        }
    }
    out.push(Outcome::gate(
        "5d cross-consistency",
        disagreements == 0,
        format!("20 systems ({holds} hold), {disagreements} disagreements"),
    ));
    out.push(Outcome::gate(
        "5e F_i = A_i for constant kernels",
        f_mismatch == 0,
        format!("{f_mismatch} entrywise mismatches"),
    ));
    let elapsed = start.elapsed();
    out.push(Outcome::gate(
        "5 runtime",
        within(elapsed, 1.0),
        format!("{:.3}s", elapsed.as_secs_f64()),
    ));
    out
}

fn augmented_equivalence() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6006);
    let g = grid(1000);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=2);
        let a = random_matrix(&mut rng, n, n, 2.0);
        let mk = random_kernel(&mut rng, n);
        let mt = random_matrix(&mut rng, n, n, 2.0);
        let b = random_matrix(&mut rng, n, m, 2.0);
        let sys = MemorySystem::new(
            a.clone(),
            mk.clone(),
            ExpPolyKernel::constant(mt.clone()),
            Injector::Constant(b.clone()),
            1.0,
        )
        .unwrap();
        let u = smooth_control(&mut rng, m, g);
        let y0 = random_vector(&mut rng, n);
        let y = Discretization::new(&sys, g).unwrap().forward(&y0, Some(&u)).unwrap();
        let mem = memoctrl::memory_functional(sys.memory_tilde(), &y, 1.0).unwrap();

        // (y, z)' = [[A, 0], [M̃, 0]](y, z) + ∫[[M, 0], [0, 0]](y, z) + [B; 0]u
        let mut big_a = DMatrix::zeros(2 * n, 2 * n);
        big_a.view_mut((0, 0), (n, n)).copy_from(&a);
        big_a.view_mut((n, 0), (n, n)).copy_from(&mt);
        let pad = |c: &DMatrix<f64>| {
            let mut p = DMatrix::zeros(2 * n, 2 * n);
            p.view_mut((0, 0), (n, n)).copy_from(c);
            p
        };
        let big_m = ExpPolyKernel::new(
            2 * n,
            mk.terms()
                .iter()
                .map(|t| ExpPolyTerm {
                    exponent: t.exponent,
                    coeffs: t.coeffs.iter().map(pad).collect(),
                })
                .collect(),
        )
        .unwrap();
        let mut big_b = DMatrix::zeros(2 * n, m);
        big_b.view_mut((0, 0), (n, m)).copy_from(&b);
        let aug = MemorySystem::new(big_a, big_m, ExpPolyKernel::zero(2 * n), Injector::Constant(big_b), 1.0).unwrap();
        let mut x0 = DVector::zeros(2 * n);
        x0.rows_mut(0, n).copy_from(&y0);
        let x = Discretization::new(&aug, g).unwrap().forward(&x0, Some(&u)).unwrap();
        worst = worst.max((x.last().rows(n, n) - &mem).amax());
    }
    vec![Outcome::gate(
        "6 augmented-system equivalence",
        worst <= 1e-8,
        format!("10 systems, max |z(T) - memory| {worst:.2e}"),
    )]
}

fn parabolic_synthesis() -> Vec<Outcome> {
    let mesh = Mesh1D::new(1.0, 40).unwrap();
    let one = ExpPolyKernel::scalar(1, 0.0, &[1.0]);
    let y0 = mesh.sine_profile(1);
    let opts = SynthesisOptions {
        epsilon: 1e-6,
        cg_tol: 1e-10,
        cg_max: Some(500),
    };
    let run = |win: MovingWindow| {
        let start = Instant::now();
        let sys = assemble_system(&mesh, &win, &one, &one, MemoryVariant::StateMemory, 1.0).unwrap();
        let res = Hum::new(&sys, TimeGrid::with_step(1.0, 2.5e-3).unwrap())
            .unwrap()
            .synthesize(&y0, &opts)
            .unwrap();
        (res, start.elapsed())
    };
    let moving = MovingWindow::new(0.1, 0.9, 0.2).unwrap();
    let covered = coverage_check(&moving, &mesh).covered;
    let (res, elapsed) = run(moving);
    let scale = y0.norm();
    let pass = covered
        && res.terminal_state_norm <= 1e-3 * scale
        && res.memory_norm <= 1e-3 * scale
        && within(elapsed, 60.0);
    let mut out = vec![Outcome::gate(
        "7 parabolic moving window",
        pass,
        format!(
            "coverage {covered}, |y(T)|/|y0| {:.2e}, |memory|/|y0| {:.2e}, {} CG its, {:.2}s",
            res.terminal_state_norm / scale,
            res.memory_norm / scale,
            res.iterations,
            elapsed.as_secs_f64()
        ),
    )];
    let (fixed, _) = run(MovingWindow::fixed(0.5, 0.2).unwrap());
    let factor = fixed.terminal_state_norm.hypot(fixed.memory_norm) / res.terminal_state_norm.hypot(res.memory_norm);
    out.push(Outcome::info(
        "7 fixed window comparison",
        factor >= 10.0,
        format!(
            "|y(T)|/|y0| {:.2e}, |memory|/|y0| {:.2e}, residual {:.1}x the moving window",
            fixed.terminal_state_norm / scale,
            fixed.memory_norm / scale,
            factor
        ),
    ));
    out
}

/// Steers `y(T)` to zero ignoring the memory target, then continues with
/// `u = 0` for `extension` past `T`.
fn inertia(memory: f64, extension: f64) -> (f64, f64) {
    let steps = 1000;
    let dt = 1.0 / steps as f64;
    let extra = (extension / dt).round() as usize;
    let target = scalar_system(0.0, memory, 1.0, 1.0);
    let state_only = target.with_memory_tilde(ExpPolyKernel::zero(1)).unwrap();
    let res = Hum::new(&state_only, grid(steps))
        .unwrap()
        .synthesize(&v1(1.0), &SynthesisOptions::new(1e-10))
        .unwrap();
    let mem = Discretization::new(&target, grid(steps))
        .unwrap()
        .memory_at_horizon(&res.state)
        .unwrap()
        .norm();

    let long = 1.0 + extra as f64 * dt;
    let long_grid = TimeGrid::new(long, steps + extra).unwrap();
    let mut u = res.control.values().to_vec();
    u.resize(steps + extra + 1, v1(0.0));
    let u = Trajectory::new(long_grid, u).unwrap();
    let extended = target.with_horizon(long).unwrap();
    let y = Discretization::new(&extended, long_grid)
        .unwrap()
        .forward(&v1(1.0), Some(&u))
        .unwrap();
    (mem, y.last().norm())
}

fn memory_inertia() -> Vec<Outcome> {
    let (mem, drift) = inertia(0.0, 0.2);
    let mut out = vec![Outcome::gate(
        "8 memory inertia",
        mem >= 0.1 && drift >= 0.01,
        format!("|memory| {mem:.4}, |y(T+0.2)| {drift:.2e} (M = 0: y' = 0 once u = 0)"),
    )];
    let (mem, drift) = inertia(1.0, 0.2);
    out.push(Outcome::info(
        "8 memory inertia with M = 1",
        mem >= 0.1 && drift >= 0.01,
        format!("|memory| {mem:.4}, |y(T+0.2)| {drift:.4}"),
    ));
    out
}

fn main() -> ExitCode {
    let suites: [fn() -> Vec<Outcome>; 8] = [
        volterra_oracle,
        duality_identity,
        exact_control_oracle,
        gradient_correctness,
        rank_conditions,
        augmented_equivalence,
        parabolic_synthesis,
        memory_inertia,
    ];
    let mut failed = 0;
    for suite in suites {
        for o in suite() {
            let tag = match (o.pass, o.gating) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "MISS",
            };
            let kind = if o.gating { "" } else { " [informational]" };
            println!("{tag} criterion {}{kind}: {}", o.id, o.detail);
            if o.gating && !o.pass {
                failed += 1;
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria met");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria not met");
        ExitCode::FAILURE
    }
}

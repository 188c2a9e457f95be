//! Acceptance run: one line per criterion and a summary line.
//!
//! The process exits 0 so a failing criterion does not stop the rest of
//! `cargo test`; with `SATMPC_ACCEPTANCE_STRICT=1` any failure exits 1.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use satmpc::cli::{certificate, reproduce_paper, simulate_problem, REPORTED_MPC_INDEX, REPORTED_RHC_INDEX};
use satmpc::config::{Problem, RunConfig};
use satmpc::control::ControlMode;
use satmpc::model::NoiseModel;
use satmpc::moments::{lambda_monte_carlo, lambda_quadrature, MomentMode, Saturator, SaturatorKind};
use satmpc::qp::{solve, SolverSettings};
use satmpc::sim::SimulationSummary;
use satmpc::specfun::{erf, erfc, tricomi_u, upper_incomplete_gamma};
use satmpc::stability::{mpc_certificate, rhc_drift_constants, LYAPUNOV_TOL};

const BIN: &str = env!("CARGO_BIN_EXE_satmpc");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Largest `‖u_t‖∞` seen across all runs, and the number of violating runs.
#[derive(Default)]
struct InputLedger {
    max: f64,
    runs: usize,
    violations: usize,
}

impl InputLedger {
    fn record(&mut self, summary: &SimulationSummary, u_max: f64) {
        self.runs += summary.performance_indices.len();
        self.max = self.max.max(summary.max_input);
        if summary.max_input > u_max + 1e-9 {
            self.violations += 1;
        }
    }
}

fn moment_reproduction() -> Outcome {
    let start = Instant::now();
    let problem = Problem::new(RunConfig::paper_preset()).unwrap();
    let lam = problem.moments().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let n = lam.lambda1.nrows();
    let mut worst1: f64 = 0.0;
    let mut worst2: f64 = 0.0;
    for i in 0..n {
        worst1 = worst1.max((lam.lambda1[(i, i)] - 3.3024).abs());
        worst2 = worst2.max((lam.lambda2[(i, i)] - 0.7846).abs());
    }
    outcome(
        worst1 <= 5e-4 && worst2 <= 5e-4 && elapsed < 1.0,
        format!(
            "Λ₁ = {:.5}, Λ₂ = {:.5} on all {n} diagonal entries (max deviation {worst1:.1e}, {worst2:.1e}), {:.1} ms",
            lam.lambda1[(0, 0)],
            lam.lambda2[(0, 0)],
            elapsed * 1e3
        ),
    )
}

fn moment_consistency() -> Outcome {
    let sats = [
        Saturator::standard_sigmoid(),
        Saturator::standard_saturation(),
        Saturator::new(SaturatorKind::ScaledSigmoid { magnitude: 5.0, slope: 1.0 }).unwrap(),
    ];
    let mut worst_z: f64 = 0.0;
    let mut bound_ok = true;
    for (k, sat) in sats.iter().enumerate() {
        for (j, &sigma) in [0.5, 1.0, 2.0, 4.0].iter().enumerate() {
            let noise = NoiseModel::zero_mean(DVector::from_element(1, sigma * sigma)).unwrap();
            let f = DMatrix::identity(1, 1);
            let quad = lambda_quadrature(sat, &f, &noise, 1, 1e-10).unwrap();
            let mc = lambda_monte_carlo(sat, &f, &noise, 1, 1_000_000, 1000 + (4 * k + j) as u64).unwrap();
            worst_z = worst_z.max((quad.block1[(0, 0)] - mc.block1[(0, 0)]).abs() / mc.error1[(0, 0)]);
            worst_z = worst_z.max((quad.block2[(0, 0)] - mc.block2[(0, 0)]).abs() / mc.error2[(0, 0)]);
            bound_ok &= quad.block1[(0, 0)] <= sat.phi_max().powi(2) + 1e-9;
        }
    }
    outcome(
        worst_z <= 4.0 && bound_ok,
        format!("12 grid points, largest |quadrature − MC| = {worst_z:.2} SE, Λ₁ ≤ φ_max² everywhere: {bound_ok}"),
    )
}

fn special_functions() -> Outcome {
    let mut u_err: f64 = 0.0;
    for i in 0..20 {
        let z = 10f64.powf(-1.0 + 3.0 * i as f64 / 19.0);
        u_err = u_err.max((tricomi_u(0.5, 1.5, z).unwrap().value - z.powf(-0.5)).abs());
    }
    let mut g_err: f64 = 0.0;
    for i in 0..20 {
        let z = 30.0 * (i + 1) as f64 / 20.0;
        g_err = g_err.max((upper_incomplete_gamma(1.0, z).unwrap().value - (-z).exp()).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pts: Vec<f64> = (0..1000).map(|_| rng.gen_range(-6.0..6.0)).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut identity_err: f64 = 0.0;
    let mut monotone = true;
    for w in pts.windows(2) {
        monotone &= erf(w[0]).unwrap() <= erf(w[1]).unwrap() && erfc(w[0]).unwrap() >= erfc(w[1]).unwrap();
    }
    for &z in &pts {
        let (e, c) = (erf(z).unwrap(), erfc(z).unwrap());
        identity_err = identity_err
            .max((erf(-z).unwrap() + e).abs())
            .max((erfc(-z).unwrap() - (2.0 - c)).abs())
            .max((e + c - 1.0).abs());
    }
    outcome(
        u_err <= 1e-10 && g_err <= 1e-12 && identity_err <= 1e-15 && monotone,
        format!(
            "U(½,3/2,z) − z^-½ ≤ {u_err:.1e}, Γ(1,z) − e^-z ≤ {g_err:.1e}, erf identities ≤ {identity_err:.1e}, monotone: {monotone}"
        ),
    )
}

fn qp_correctness() -> Outcome {
    let settings = SolverSettings::default();
    let mut worst_gap: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut zero_ok = true;
    for seed in 1000..1050 {
        let qp = common::random_qp(seed);
        let sol = solve(&qp, &settings).unwrap();
        let (oracle, _, _) = common::projected_gradient_oracle(&qp, 40_000);
        worst_gap = worst_gap.max((sol.objective - oracle).abs() / oracle.abs().max(1.0));
        worst_kkt = worst_kkt.max(sol.kkt_residual);
        let rows = qp.b.len();
        let zg = DMatrix::zeros(rows, qp.lambda1.nrows());
        zero_ok &= qp.feasibility_margin(&zg, &DVector::zeros(rows)) >= 0.0;
    }
    outcome(
        worst_gap <= 1e-5 && worst_kkt <= 1e-6 && zero_ok,
        format!("50 instances, objective gap ≤ {worst_gap:.1e}, KKT ≤ {worst_kkt:.1e}, zero policy feasible: {zero_ok}"),
    )
}

fn hard_bound(ledger: &mut InputLedger) -> Outcome {
    // Extra runs with a different saturator and a tighter bound.
    for mode in [ControlMode::Mpc, ControlMode::Rhc] {
        let mut config = RunConfig::paper_preset();
        config.sim.mode = mode;
        config.sim.trials = 20;
        config.constraint.u_max = 2.0;
        config.constraint.phi_max = 1.0;
        config.moments.mode = MomentMode::Quadrature;
        config.saturator.kind = "standard_saturation".into();
        let p = Problem::new(config).unwrap();
        let out = simulate_problem(&p, &p.moments().unwrap()).unwrap();
        ledger.record(&out.summary, p.constraint.u_max());
    }
    outcome(
        ledger.violations == 0 && ledger.runs > 0,
        format!(
            "{} trajectories, {} violations, largest |u| = {:.12} (bounds 10 and 2)",
            ledger.runs, ledger.violations, ledger.max
        ),
    )
}

fn one_step_drift(problem: &Problem) -> (usize, f64) {
    let lambda = problem.moments().unwrap();
    let mut ctrl = problem.controller(&lambda).unwrap();
    let cert = mpc_certificate(&problem.model, &problem.constraint, &problem.noise).unwrap();
    let v = |x: &DVector<f64>| x.dot(&(&cert.p * x));
    let n = problem.model.n();
    let sd: Vec<f64> = (0..n).map(|i| problem.noise.std_dev(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dir = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let x = &dir * (cert.radius * rng.gen_range(1.01..3.0) / dir.amax());
        let u = ctrl.mpc_step(&x).unwrap();
        let mean = problem.model.a() * &x + problem.model.b() * &u + problem.model.r();
        let draws = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let w = DVector::from_fn(n, |i, _| sd[i] * rng.sample::<f64, _>(StandardNormal));
            let val = v(&(&mean + problem.model.f() * w));
            sum += val;
            sq += val * val;
        }
        let m = sum / draws as f64;
        let se = ((sq / draws as f64 - m * m) / draws as f64).sqrt();
        let target = cert.lambda * v(&x);
        worst = worst.max(m / target);
        if m - 4.0 * se <= target {
            passed += 1;
        }
    }
    (passed, worst)
}

fn stability(ledger: &mut InputLedger) -> Outcome {
    let problem = Problem::new(RunConfig::paper_preset()).unwrap();
    let lambda = problem.moments().unwrap();
    let mpc = mpc_certificate(&problem.model, &problem.constraint, &problem.noise).unwrap();
    let rhc = rhc_drift_constants(&problem.model, &problem.constraint, &problem.noise, &lambda).unwrap();
    let residual = rhc.steps.iter().map(|s| s.lyapunov_residual).fold(mpc.lyapunov_residual, f64::max);
    let (drift_passed, drift_worst) = one_step_drift(&problem);

    let mut below = Vec::new();
    for mode in [ControlMode::Mpc, ControlMode::Rhc] {
        let mut config = RunConfig::paper_preset();
        config.sim.mode = mode;
        config.sim.steps = 200;
        config.sim.trials = 50;
        let p = Problem::new(config).unwrap();
        let out = simulate_problem(&p, &lambda).unwrap();
        ledger.record(&out.summary, p.constraint.u_max());
        let cert = certificate(&p, mode, &lambda).unwrap();
        let s0 = out.summary.initial_second_moment_matrix();
        let mut worst: f64 = 0.0;
        let mut ok = out.summary.failures.is_empty();
        for (t, &m) in out.summary.mean_sq_norm.iter().enumerate() {
            let bound = cert.moment_bound(t, &s0);
            worst = worst.max(m / bound);
            ok &= m < bound;
        }
        below.push((ok, worst));
    }
    let sims_ok = below.iter().all(|b| b.0);
    outcome(
        residual <= LYAPUNOV_TOL && drift_passed == 20 && sims_ok,
        format!(
            "Lyapunov residual {residual:.1e}, drift {drift_passed}/20 states (max E V(x+)/λV(x) = {drift_worst:.3}), T=200 max E‖x_t‖²/bound: MPC {:.3}, RHC {:.3}",
            below[0].1, below[1].1
        ),
    )
}

fn performance_indices(ledger: &mut InputLedger) -> Outcome {
    let start = Instant::now();
    let (mpc, rhc, _) = reproduce_paper(None, None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    ledger.record(&mpc.summary, 10.0);
    ledger.record(&rhc.summary, 10.0);
    let m = mpc.summary.index_mean;
    let r = rhc.summary.index_mean;
    let dm = (m - REPORTED_MPC_INDEX) / REPORTED_MPC_INDEX;
    let dr = (r - REPORTED_RHC_INDEX) / REPORTED_RHC_INDEX;
    let pass = dm.abs() <= 0.15 && dr.abs() <= 0.15 && m <= r && elapsed < 300.0;
    outcome(
        pass,
        format!(
            "MPC {m:.0} ± {:.0} ({:+.1}% vs {REPORTED_MPC_INDEX}), RHC {r:.0} ± {:.0} ({:+.1}% vs {REPORTED_RHC_INDEX}), MPC ≤ RHC: {}, {elapsed:.1} s",
            mpc.summary.index_std_error,
            100.0 * dm,
            rhc.summary.index_std_error,
            100.0 * dr,
            m <= r
        ),
    )
}

fn run_twice(args: &[&str], config: &Path) -> bool {
    let mut results = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut cmd = Command::new(BIN);
        cmd.args(args).arg("--config").arg(config).arg("--out").arg(dir.path());
        let out = cmd.output().unwrap();
        if !out.status.success() {
            return false;
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        results.push((out.stdout, files));
    }
    !results[0].1.is_empty() && results[0] == results[1]
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("paper.json");
    std::fs::write(&config, serde_json::to_string_pretty(&RunConfig::paper_preset()).unwrap()).unwrap();
    let commands: [&[&str]; 6] = [
        &["moments"],
        &["solve", "--x0", "50,50,50"],
        &["simulate", "--mode", "mpc"],
        &["simulate", "--mode", "rhc", "--seed", "3"],
        &["certify", "--mode", "rhc"],
        &["reproduce-paper"],
    ];
    let mut failed = Vec::new();
    for args in commands {
        if !run_twice(args, &config) {
            failed.push(args.join(" "));
        }
    }
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} commands byte-identical across two runs", commands.len())
        } else {
            format!("differing outputs: {}", failed.join("; "))
        },
    )
}

fn main() {
    // `cargo test -- --list` and filters: this binary holds a single check.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut ledger = InputLedger::default();
    let early = [
        ("moment reproduction", moment_reproduction()),
        ("moment consistency", moment_consistency()),
        ("special functions", special_functions()),
        ("QP correctness", qp_correctness()),
    ];
    // The input bound also covers the trajectories of criteria 6 and 7.
    let stab = stability(&mut ledger);
    let perf = performance_indices(&mut ledger);
    let mut results: Vec<(&str, Outcome)> = early.into_iter().collect();
    results.push(("hard input bound", hard_bound(&mut ledger)));
    results.push(("stability certificates", stab));
    results.push(("performance indices", perf));
    results.push(("determinism", determinism()));

    let mut passed = 0;
    for (k, (name, o)) in results.iter().enumerate() {
        println!("[{}] {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, k + 1, o.detail);
        passed += o.pass as usize;
    }
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let strict = std::env::var("SATMPC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed != results.len() {
        std::process::exit(1);
    }
}

//! Command implementations behind the `satmpc` binary.
//!
//! Every command returns JSON values so the C interface can reuse them.
//! Files are written once at the end of a command, each through a temporary
//! file and a rename.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde_json::{json, Value};

use crate::config::{rows, Problem, RunConfig, SCHEMA_VERSION};
use crate::control::ControlMode;
use crate::error::{Error, Result};
use crate::moments::MomentMatrices;
use crate::qp::{evaluate_expected_cost, PolicyParameters};
use crate::sim::{simulate, write_trajectories_csv, IndexConvention, SimulationSummary, TrajectoryRecord};
use crate::stability::{
    empirical_variance_check, mpc_certificate, rhc_drift_constants, Certificate, DriftCertificate, RhcCertificate,
};

/// Performance indices reported for the numerical example.
pub const REPORTED_MPC_INDEX: f64 = 3985.0;
pub const REPORTED_RHC_INDEX: f64 = 4327.0;

#[derive(Debug, Parser)]
#[command(name = "satmpc", version, about = "Stochastic MPC with saturated disturbance feedback and hard input bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `sim.mode`.
    #[arg(long, global = true)]
    pub mode: Option<ControlMode>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `sim.trials`.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute Λ₁, Λ₂ and write moments.json.
    Moments,
    /// Solve the policy program at one initial state and write solution.json.
    Solve {
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Vec<f64>,
    },
    /// Closed-loop Monte Carlo; writes trajectories.csv and summary.json.
    Simulate,
    /// Drift certificate; writes certificate.json.
    Certify,
    /// Run the numerical example in both modes and compare with the published indices.
    ReproducePaper,
    /// Print the numerical example as a configuration file.
    Preset,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn to_pretty(value: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json values always serialize");
    s.push('\n');
    s.into_bytes()
}

pub fn moments_json(lambda: &MomentMatrices) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "mode": lambda.mode,
        "horizon": lambda.horizon,
        "lambda1_block": rows(&lambda.block1),
        "lambda2_block": rows(&lambda.block2),
        "errors": {
            "lambda1_block": rows(&lambda.error1),
            "lambda2_block": rows(&lambda.error2),
        },
        "lambda1": rows(&lambda.lambda1),
        "lambda2": rows(&lambda.lambda2),
    })
}

pub fn policy_json(policy: &PolicyParameters, expected_cost: f64) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "G_bar": rows(&policy.g_bar),
        "d_bar": policy.d_bar.as_slice(),
        "objective": policy.objective,
        "expected_cost": expected_cost,
        "kkt_residual": policy.kkt_residual,
        "kkt": policy.residuals,
        "feasibility_margin": policy.feasibility_margin,
        "iterations": policy.iterations,
    })
}

pub fn drift_json(c: &DriftCertificate) -> Value {
    json!({
        "P": rows(&c.p),
        "lambda_min_p": c.lambda_min_p,
        "lambda_max_p": c.lambda_max_p,
        "lyapunov_residual": c.lyapunov_residual,
        "c1": c.c1,
        "c2": c.c2,
        "theta": c.theta,
        "radius": c.radius,
        "lambda": c.lambda,
        "b": c.b,
    })
}

pub fn rhc_json(c: &RhcCertificate) -> Value {
    let steps: Vec<Value> = c
        .steps
        .iter()
        .map(|s| {
            json!({
                "step": s.step,
                "P": rows(&s.p),
                "lambda_min_p": s.lambda_min_p,
                "lambda_max_p": s.lambda_max_p,
                "lyapunov_residual": s.lyapunov_residual,
                "c1": s.c1,
                "c2": s.c2,
                "gain_term": s.gain_term,
                "theta": s.theta,
                "radius": s.radius,
                "lambda": s.lambda,
                "b": s.b,
            })
        })
        .collect();
    json!({
        "horizon": c.horizon,
        "steps": steps,
        "lambda_agg": c.lambda_agg,
        "radius_prime": c.radius_prime,
        "lambda_bar": c.lambda_bar,
        "lambda_under": c.lambda_under,
        "lambda_prime": c.lambda_prime,
        "b_prime": c.b_prime,
        "lambda_n": c.lambda_n,
        "radius_n": c.radius_n,
        "b": c.b,
    })
}

fn certificate_body(cert: &Certificate) -> Value {
    match cert {
        Certificate::Mpc(c) => json!({"mode": "mpc", "mpc": drift_json(c)}),
        Certificate::Rhc(c) => json!({"mode": "rhc", "rhc": rhc_json(c)}),
    }
}

pub fn certificate(problem: &Problem, mode: ControlMode, lambda: &MomentMatrices) -> Result<Certificate> {
    if !problem.model.is_schur() {
        return Err(Error::NotCertifiable(format!(
            "A is not Schur stable (spectral radius {})",
            problem.model.spectral_radius()
        )));
    }
    Ok(match mode {
        ControlMode::Mpc => Certificate::Mpc(mpc_certificate(&problem.model, &problem.constraint, &problem.noise)?),
        ControlMode::Rhc => Certificate::Rhc(rhc_drift_constants(&problem.model, &problem.constraint, &problem.noise, lambda)?),
    })
}

pub fn certificate_json(problem: &Problem, mode: ControlMode, lambda: &MomentMatrices) -> Result<Value> {
    let cert = certificate(problem, mode, lambda)?;
    let mut v = certificate_body(&cert);
    v["schema_version"] = json!(SCHEMA_VERSION);
    Ok(v)
}

pub fn solve_json(problem: &Problem, lambda: &MomentMatrices, x0: &[f64]) -> Result<Value> {
    let mut ctrl = problem.controller(lambda)?;
    let policy = ctrl.solve_at(&DVector::from_column_slice(x0))?;
    let cost = evaluate_expected_cost(&policy, ctrl.problem());
    Ok(policy_json(&policy, cost))
}

pub struct SimulationOutput {
    pub summary: SimulationSummary,
    pub records: Vec<TrajectoryRecord>,
    pub json: Value,
}

impl SimulationOutput {
    pub fn csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &self.records).expect("writing to memory cannot fail");
        buf
    }
}

pub fn simulate_problem(problem: &Problem, lambda: &MomentMatrices) -> Result<SimulationOutput> {
    let settings = problem.simulation_settings();
    let ctrl = problem.controller(lambda)?;
    let h = problem.horizon();
    let (summary, records) = simulate(&ctrl, &problem.noise, problem.cost.q(0), problem.cost.r(0), problem.cost.q(h), &settings)?;
    let cert = if problem.model.is_schur() {
        Some(certificate(problem, settings.mode, lambda)?)
    } else {
        None
    };
    let report = empirical_variance_check(&summary, cert.as_ref());
    let json = json!({
        "schema_version": SCHEMA_VERSION,
        "moments_mode": lambda.mode,
        "diagnostics": problem.diagnostics,
        "summary": summary,
        "variance_check": report,
        "certificate": cert.as_ref().map(certificate_body),
    });
    Ok(SimulationOutput { summary, records, json })
}

fn index_mean(summary: &SimulationSummary, convention: IndexConvention) -> (f64, f64) {
    summary
        .index_variants
        .iter()
        .find(|v| v.convention == convention && !v.include_terminal)
        .map(|v| (v.mean, v.std_error))
        .expect("every convention is summarized")
}

/// Both modes on the numerical example, plus a comparison with the published indices.
pub fn reproduce_paper(seed: Option<u64>, trials: Option<usize>) -> Result<(SimulationOutput, SimulationOutput, Value)> {
    let mut config = RunConfig::paper_preset();
    if let Some(s) = seed {
        config.sim.seed = s;
    }
    if let Some(t) = trials {
        config.sim.trials = t;
    }
    let mut outputs = Vec::new();
    for mode in [ControlMode::Mpc, ControlMode::Rhc] {
        let mut c = config.clone();
        c.sim.mode = mode;
        let problem = Problem::new(c)?;
        let lambda = problem.moments()?;
        outputs.push(simulate_problem(&problem, &lambda)?);
    }
    let rhc = outputs.pop().expect("two runs");
    let mpc = outputs.pop().expect("two runs");
    let row = |s: &SimulationSummary, reported: f64| {
        let (running, running_se) = index_mean(s, IndexConvention::Running);
        json!({
            "mean": s.index_mean,
            "std_error": s.index_std_error,
            "reported": reported,
            "relative_difference": (s.index_mean - reported) / reported,
            "running_mean": running,
            "running_std_error": running_se,
            "max_input": s.max_input,
        })
    };
    let table = json!({
        "schema_version": SCHEMA_VERSION,
        "seed": config.sim.seed,
        "trials": config.sim.trials,
        "steps": config.sim.steps,
        "index": config.sim.index,
        "mpc": row(&mpc.summary, REPORTED_MPC_INDEX),
        "rhc": row(&rhc.summary, REPORTED_RHC_INDEX),
        "mpc_not_above_rhc": mpc.summary.index_mean <= rhc.summary.index_mean,
    });
    Ok((mpc, rhc, table))
}

fn load_problem(cli: &Cli) -> Result<Problem> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required for this command".into()))?;
    let mut config = RunConfig::from_path(path)?;
    if let Some(m) = cli.mode {
        config.sim.mode = m;
    }
    if let Some(s) = cli.seed {
        config.sim.seed = s;
    }
    if let Some(t) = cli.trials {
        config.sim.trials = t;
    }
    Problem::new(config)
}

fn print_json(v: &Value) {
    print!("{}", String::from_utf8(to_pretty(v)).expect("json is utf-8"));
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    let ensure_out = || std::fs::create_dir_all(out).map_err(Error::from);
    match &cli.command {
        Command::Preset => {
            print_json(&serde_json::to_value(RunConfig::paper_preset())?);
        }
        Command::Moments => {
            let problem = load_problem(cli)?;
            let v = moments_json(&problem.moments()?);
            ensure_out()?;
            write_atomic(&out.join("moments.json"), &to_pretty(&v))?;
            print_json(&v);
        }
        Command::Solve { x0 } => {
            let problem = load_problem(cli)?;
            let x0 = if x0.is_empty() {
                match &problem.config.sim.x0 {
                    crate::sim::InitialState::Fixed(v) => v.clone(),
                    _ => return Err(Error::Config("solve needs --x0 or a fixed sim.x0".into())),
                }
            } else {
                x0.clone()
            };
            let v = solve_json(&problem, &problem.moments()?, &x0)?;
            ensure_out()?;
            write_atomic(&out.join("solution.json"), &to_pretty(&v))?;
            print_json(&v);
        }
        Command::Simulate => {
            let problem = load_problem(cli)?;
            let result = simulate_problem(&problem, &problem.moments()?)?;
            ensure_out()?;
            write_atomic(&out.join("trajectories.csv"), &result.csv())?;
            write_atomic(&out.join("summary.json"), &to_pretty(&result.json))?;
            let s = &result.summary;
            println!(
                "{:?}: {} trials, mean index {:.3} (se {:.3}), max |u| {:.6}, failures {}",
                s.mode,
                s.performance_indices.len(),
                s.index_mean,
                s.index_std_error,
                s.max_input,
                s.failures.len()
            );
        }
        Command::Certify => {
            let problem = load_problem(cli)?;
            let v = certificate_json(&problem, problem.config.sim.mode, &problem.moments()?)?;
            ensure_out()?;
            write_atomic(&out.join("certificate.json"), &to_pretty(&v))?;
            print_json(&v);
        }
        Command::ReproducePaper => {
            let (mpc, rhc, table) = reproduce_paper(cli.seed, cli.trials)?;
            ensure_out()?;
            write_atomic(&out.join("trajectories_mpc.csv"), &mpc.csv())?;
            write_atomic(&out.join("trajectories_rhc.csv"), &rhc.csv())?;
            write_atomic(&out.join("summary_mpc.json"), &to_pretty(&mpc.json))?;
            write_atomic(&out.join("summary_rhc.json"), &to_pretty(&rhc.json))?;
            write_atomic(&out.join("reproduction.json"), &to_pretty(&table))?;
            println!("mode  mean index  std error  reported  rel. diff");
            for (name, key) in [("MPC", "mpc"), ("RHC", "rhc")] {
                let r = &table[key];
                println!(
                    "{name}   {:>10.1}  {:>9.1}  {:>8.0}  {:>+9.3}",
                    r["mean"].as_f64().unwrap_or(f64::NAN),
                    r["std_error"].as_f64().unwrap_or(f64::NAN),
                    r["reported"].as_f64().unwrap_or(f64::NAN),
                    r["relative_difference"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
    }
    Ok(())
}

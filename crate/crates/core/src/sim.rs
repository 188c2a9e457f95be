//! Closed-loop Monte Carlo trials.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`). Trial `k` draws its initial
//! state from stream `2k` and its noise from stream `2k + 1` of the run seed, so
//! a trial's record does not depend on how many other trials run.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::{ControlMode, Controller, ControllerState};
use crate::error::{Error, Result};
use crate::model::NoiseModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Fixed(Vec<f64>),
    /// Every coordinate uniform on `[lo, hi]`.
    UniformBox { lo: f64, hi: f64 },
}

/// Which stages the performance index sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexConvention {
    /// `Σ_{t=1}^{T-1}`: leaves out the stage at `x_0`, which no decision affects.
    #[default]
    SkipInitial,
    /// `Σ_{t=0}^{T-1}`.
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSpec {
    pub convention: IndexConvention,
    /// Adds `x_Tᵀ Q_N x_T`.
    pub include_terminal: bool,
}

impl Default for IndexSpec {
    fn default() -> Self {
        IndexSpec {
            convention: IndexConvention::SkipInitial,
            include_terminal: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationSettings {
    pub mode: ControlMode,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub x0: InitialState,
    pub index: IndexSpec,
}

const ROLE_X0: u64 = 0;
const ROLE_NOISE: u64 = 1;

pub fn trial_stream(seed: u64, trial: usize, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * trial as u64 + role);
    rng
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub trial: usize,
    pub seed: u64,
    /// `x_0..x_T`.
    pub states: Vec<DVector<f64>>,
    /// `u_0..u_{T-1}`.
    pub inputs: Vec<DVector<f64>>,
    /// `x_tᵀQx_t + u_tᵀRu_t` for `t < T`.
    pub stage_costs: Vec<f64>,
    /// `x_Tᵀ Q_N x_T`.
    pub terminal_cost: f64,
    /// Reconstructed `Fw_t`.
    pub noises: Vec<DVector<f64>>,
}

impl TrajectoryRecord {
    pub fn max_input(&self) -> f64 {
        self.inputs.iter().map(|u| u.amax()).fold(0.0, f64::max)
    }
}

pub fn performance_index(record: &TrajectoryRecord, index: IndexSpec) -> f64 {
    let start = match index.convention {
        IndexConvention::SkipInitial => 1,
        IndexConvention::Running => 0,
    };
    let running: f64 = record.stage_costs.iter().skip(start).sum();
    if index.include_terminal {
        running + record.terminal_cost
    } else {
        running
    }
}

fn quad_form(x: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    x.dot(&(q * x))
}

fn initial_state(spec: &InitialState, n: usize, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    match spec {
        InitialState::Fixed(v) => {
            if v.len() != n {
                return Err(Error::Dimension(format!("fixed x0 has length {}, expected {n}", v.len())));
            }
            Ok(DVector::from_column_slice(v))
        }
        InitialState::UniformBox { lo, hi } => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("uniform_box needs finite lo < hi, got [{lo}, {hi}]")));
            }
            Ok(DVector::from_fn(n, |_, _| rng.gen_range(*lo..*hi)))
        }
    }
}

/// One closed-loop trajectory of `steps` steps.
///
/// In RHC mode the plan always covers a full block of `N` steps; a final
/// partial block is simply cut off at `steps`, which is the same as planning
/// over `steps` rounded up to a multiple of `N` and truncating the report.
pub fn run_trial(
    ctrl: &mut Controller,
    noise: &NoiseModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_terminal: &DMatrix<f64>,
    settings: &SimulationSettings,
    trial: usize,
) -> Result<TrajectoryRecord> {
    let n = ctrl.model().n();
    let mut x = initial_state(&settings.x0, n, &mut trial_stream(settings.seed, trial, ROLE_X0))?;
    let mut noise_rng = trial_stream(settings.seed, trial, ROLE_NOISE);
    let sd: Vec<f64> = (0..n).map(|i| noise.std_dev(i)).collect();
    let mut state = ControllerState::new(settings.mode);
    let mut record = TrajectoryRecord {
        trial,
        seed: settings.seed,
        states: Vec::with_capacity(settings.steps + 1),
        inputs: Vec::with_capacity(settings.steps),
        stage_costs: Vec::with_capacity(settings.steps),
        terminal_cost: 0.0,
        noises: Vec::with_capacity(settings.steps),
    };
    for _ in 0..settings.steps {
        let u = state.act(ctrl, &x)?;
        let w = DVector::from_fn(n, |i, _| {
            let z: f64 = noise_rng.sample(StandardNormal);
            noise.mean()[i] + sd[i] * z
        });
        let x_next = ctrl.model().step(&x, &u, &w);
        let fw = state.observe(ctrl, &x, &u, &x_next);
        record.stage_costs.push(quad_form(&x, q) + quad_form(&u, r));
        record.states.push(x);
        record.inputs.push(u);
        record.noises.push(fw);
        x = x_next;
    }
    record.terminal_cost = quad_form(&x, q_terminal);
    record.states.push(x);
    Ok(record)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexStats {
    pub convention: IndexConvention,
    pub include_terminal: bool,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub mode: ControlMode,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub index: IndexSpec,
    pub performance_indices: Vec<f64>,
    pub index_mean: f64,
    pub index_std_error: f64,
    /// Mean and standard error under every convention, for comparison.
    pub index_variants: Vec<IndexStats>,
    /// Per-step mean of `‖x_t‖²` over completed trials, `t = 0..T`.
    pub mean_sq_norm: Vec<f64>,
    pub sq_norm_std_error: Vec<f64>,
    /// `E[x₀x₀ᵀ]` over completed trials, row-major.
    pub initial_second_moment: Vec<Vec<f64>>,
    pub max_input: f64,
    pub failures: Vec<TrialFailure>,
}

impl SimulationSummary {
    pub fn initial_second_moment_matrix(&self) -> DMatrix<f64> {
        let n = self.initial_second_moment.len();
        DMatrix::from_fn(n, n, |i, j| self.initial_second_moment[i][j])
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

pub fn summarize(records: &[TrajectoryRecord], failures: Vec<TrialFailure>, settings: &SimulationSettings) -> Result<SimulationSummary> {
    if records.is_empty() {
        let detail = failures.first().map(|f| f.message.clone()).unwrap_or_default();
        return Err(Error::numerical(format!("every trial failed; first failure: {detail}")));
    }
    let indices: Vec<f64> = records.iter().map(|r| performance_index(r, settings.index)).collect();
    let (index_mean, index_std_error) = mean_and_se(&indices);
    let mut index_variants = Vec::new();
    for convention in [IndexConvention::SkipInitial, IndexConvention::Running] {
        for include_terminal in [false, true] {
            let spec = IndexSpec {
                convention,
                include_terminal,
            };
            let v: Vec<f64> = records.iter().map(|r| performance_index(r, spec)).collect();
            let (mean, std_error) = mean_and_se(&v);
            index_variants.push(IndexStats {
                convention,
                include_terminal,
                mean,
                std_error,
            });
        }
    }
    let steps = records[0].states.len();
    let mut mean_sq_norm = Vec::with_capacity(steps);
    let mut sq_norm_std_error = Vec::with_capacity(steps);
    for t in 0..steps {
        let v: Vec<f64> = records.iter().map(|r| r.states[t].norm_squared()).collect();
        let (m, se) = mean_and_se(&v);
        mean_sq_norm.push(m);
        sq_norm_std_error.push(se);
    }
    let n = records[0].states[0].len();
    let mut s0 = DMatrix::<f64>::zeros(n, n);
    for r in records {
        s0 += &r.states[0] * r.states[0].transpose();
    }
    s0 /= records.len() as f64;
    Ok(SimulationSummary {
        initial_second_moment: s0.row_iter().map(|row| row.iter().copied().collect()).collect(),
        mode: settings.mode,
        steps: settings.steps,
        trials: settings.trials,
        seed: settings.seed,
        index: settings.index,
        performance_indices: indices,
        index_mean,
        index_std_error,
        index_variants,
        mean_sq_norm,
        sq_norm_std_error,
        max_input: records.iter().map(|r| r.max_input()).fold(0.0, f64::max),
        failures,
    })
}

/// Runs all trials, spread over the available cores, and aggregates in trial order.
pub fn simulate(
    ctrl: &Controller,
    noise: &NoiseModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_terminal: &DMatrix<f64>,
    settings: &SimulationSettings,
) -> Result<(SimulationSummary, Vec<TrajectoryRecord>)> {
    if settings.steps == 0 || settings.trials == 0 {
        return Err(Error::Config("simulation needs T >= 1 and trials >= 1".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(settings.trials);
    let mut outcomes: Vec<(usize, Result<TrajectoryRecord>)> = if workers <= 1 {
        let mut local = ctrl.clone();
        (0..settings.trials)
            .map(|k| (k, run_trial(&mut local, noise, q, r, q_terminal, settings, k)))
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let mut local = ctrl.clone();
                    scope.spawn(move || {
                        (w..settings.trials)
                            .step_by(workers)
                            .map(|k| (k, run_trial(&mut local, noise, q, r, q_terminal, settings, k)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("simulation worker panicked"))
                .collect()
        })
    };
    outcomes.sort_by_key(|(k, _)| *k);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (trial, outcome) in outcomes {
        match outcome {
            Ok(rec) => records.push(rec),
            Err(e @ (Error::Dimension(_) | Error::Config(_))) => return Err(e),
            Err(e) => failures.push(TrialFailure {
                trial,
                message: e.to_string(),
            }),
        }
    }
    let summary = summarize(&records, failures, settings)?;
    Ok((summary, records))
}

/// Writes `trial,t,x_1..x_n,u_1..u_m,stage_cost`. The row at `t = T` carries the
/// final state with empty input and the terminal cost.
pub fn write_trajectories_csv<W: Write>(out: &mut W, records: &[TrajectoryRecord]) -> std::io::Result<()> {
    let Some(first) = records.first() else {
        return writeln!(out, "trial,t,stage_cost");
    };
    let n = first.states[0].len();
    let m = first.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["trial".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.push("stage_cost".into());
    writeln!(out, "{}", header.join(","))?;
    for rec in records {
        for (t, x) in rec.states.iter().enumerate() {
            let mut row = vec![rec.trial.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            match rec.inputs.get(t) {
                Some(u) => {
                    row.extend(u.iter().map(|v| v.to_string()));
                    row.push(rec.stage_costs[t].to_string());
                }
                None => {
                    row.extend(std::iter::repeat_n(String::new(), m));
                    row.push(rec.terminal_cost.to_string());
                }
            }
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

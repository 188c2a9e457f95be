//! JSON run configuration. Matrices are row-major nested arrays.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::control::{ControlMode, Controller};
use crate::error::{Error, Result};
use crate::model::{normalize_affine, validate, CostSpec, Diagnostics, InputConstraint, NoiseModel, SystemModel};
use crate::moments::{
    lambda_monte_carlo, lambda_paper_form, lambda_quadrature, MomentMatrices, MomentMode, Saturator, SaturatorKind,
    DEFAULT_QUAD_TOL,
};
use crate::qp::SolverSettings;
use crate::sim::{IndexConvention, IndexSpec, InitialState, SimulationSettings};

pub const SCHEMA_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "F")]
    pub f: Rows,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub u_max: f64,
    pub phi_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturatorConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

/// One matrix for every stage, or one per stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageWeights {
    Constant(Rows),
    PerStage(Vec<Rows>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(rename = "Q")]
    pub q: StageWeights,
    #[serde(rename = "R")]
    pub r: StageWeights,
    #[serde(rename = "N")]
    pub horizon: usize,
}

fn default_trials() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub mode: ControlMode,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub x0: InitialState,
    #[serde(default)]
    pub index: IndexConvention,
    #[serde(default)]
    pub include_terminal: bool,
}

fn default_tol() -> f64 {
    DEFAULT_QUAD_TOL
}
fn default_samples() -> usize {
    1_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub mode: MomentMode,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_samples")]
    pub mc_samples: usize,
    /// Seed of the Monte Carlo moment estimate; the simulation seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub constraint: ConstraintConfig,
    pub noise: NoiseConfig,
    pub saturator: SaturatorConfig,
    pub cost: CostConfig,
    pub sim: SimConfig,
    pub moments: MomentsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The numerical example: 3 states, 1 input, `N = 6`, sigmoid feedback.
    pub fn paper_preset() -> Self {
        RunConfig {
            system: SystemConfig {
                a: vec![vec![0.8, 0.1, 0.01], vec![0.3, 0.3, 0.06], vec![0.09, 0.02, 0.5]],
                b: vec![vec![1.0], vec![2.0], vec![0.5]],
                f: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
                r: vec![0.0; 3],
            },
            constraint: ConstraintConfig {
                u_max: 10.0,
                phi_max: 5.0,
            },
            noise: NoiseConfig {
                mean: vec![0.0; 3],
                cov_diag: vec![4.0; 3],
            },
            saturator: SaturatorConfig {
                kind: "standard_sigmoid".into(),
                params: Value::Null,
            },
            cost: CostConfig {
                q: StageWeights::Constant(vec![vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 3.0]]),
                r: StageWeights::Constant(vec![vec![2.0]]),
                horizon: 6,
            },
            sim: SimConfig {
                mode: ControlMode::Mpc,
                steps: 40,
                trials: 50,
                seed: 1,
                x0: InitialState::UniformBox { lo: -50.0, hi: 50.0 },
                index: IndexConvention::SkipInitial,
                include_terminal: false,
            },
            moments: MomentsConfig {
                mode: MomentMode::PaperForm,
                tol: DEFAULT_QUAD_TOL,
                mc_samples: default_samples(),
                mc_seed: None,
            },
            solver: None,
        }
    }
}

pub fn matrix(name: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("`{name}` must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn stage_weights(name: &str, w: &StageWeights, count: usize) -> Result<Vec<DMatrix<f64>>> {
    match w {
        StageWeights::Constant(r) => Ok(vec![matrix(name, r)?; count]),
        StageWeights::PerStage(list) => {
            if list.len() != count {
                return Err(Error::Config(format!("`{name}` lists {} stages, expected {count}", list.len())));
            }
            list.iter().map(|r| matrix(name, r)).collect()
        }
    }
}

pub fn saturator_kind(cfg: &SaturatorConfig) -> Result<SaturatorKind> {
    let mut obj = match &cfg.params {
        Value::Null => serde_json::Map::new(),
        Value::Object(o) => o.clone(),
        _ => return Err(Error::Config("saturator params must be an object".into())),
    };
    obj.insert("kind".into(), Value::String(cfg.kind.clone()));
    serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Config(format!("saturator: {e}")))
}

/// Validated model objects built from a [`RunConfig`]. Noise with a nonzero
/// mean is shifted into `r`, so the stored noise is always zero mean.
#[derive(Debug, Clone)]
pub struct Problem {
    pub config: RunConfig,
    pub model: SystemModel,
    pub constraint: InputConstraint,
    pub noise: NoiseModel,
    pub cost: CostSpec,
    pub saturator: Saturator,
    pub diagnostics: Diagnostics,
}

impl Problem {
    pub fn new(config: RunConfig) -> Result<Self> {
        let a = matrix("A", &config.system.a)?;
        let b = matrix("B", &config.system.b)?;
        let f = matrix("F", &config.system.f)?;
        let r = DVector::from_column_slice(&config.system.r);
        let m = b.ncols();
        let mean = DVector::from_column_slice(&config.noise.mean);
        if mean.len() != a.nrows() {
            return Err(Error::Dimension(format!("noise mean has length {}, expected {}", mean.len(), a.nrows())));
        }
        let raw_noise = NoiseModel::new(mean, DVector::from_column_slice(&config.noise.cov_diag))?;
        let (model, noise) = normalize_affine(a, &b, f, &r, &DMatrix::identity(m, m), &DVector::zeros(m), &raw_noise)?;
        let constraint = InputConstraint::new(config.constraint.u_max, config.constraint.phi_max)?;
        let horizon = config.cost.horizon;
        if horizon == 0 {
            return Err(Error::Config("cost.N must be at least 1".into()));
        }
        let cost = CostSpec::new(
            stage_weights("Q", &config.cost.q, horizon + 1)?,
            stage_weights("R", &config.cost.r, horizon)?,
        )?;
        let saturator = Saturator::new(saturator_kind(&config.saturator)?)?;
        if saturator.phi_max() > constraint.phi_max() {
            return Err(Error::Config(format!(
                "saturator reaches {} but phi_max is {}",
                saturator.phi_max(),
                constraint.phi_max()
            )));
        }
        let diagnostics = validate(&model, &constraint, &noise, &cost)?;
        Ok(Problem {
            config,
            model,
            constraint,
            noise,
            cost,
            saturator,
            diagnostics,
        })
    }

    pub fn horizon(&self) -> usize {
        self.cost.horizon()
    }

    pub fn moments(&self) -> Result<MomentMatrices> {
        let mc = &self.config.moments;
        let n = self.horizon();
        match mc.mode {
            MomentMode::PaperForm => lambda_paper_form(&self.saturator, self.model.f(), &self.noise, n),
            MomentMode::Quadrature => lambda_quadrature(&self.saturator, self.model.f(), &self.noise, n, mc.tol),
            MomentMode::MonteCarlo => lambda_monte_carlo(
                &self.saturator,
                self.model.f(),
                &self.noise,
                n,
                mc.mc_samples,
                mc.mc_seed.unwrap_or(self.config.sim.seed),
            ),
        }
    }

    pub fn solver_settings(&self) -> SolverSettings {
        match &self.config.solver {
            Some(s) => SolverSettings {
                max_iter: s.max_iter,
                eps_abs: s.eps_abs,
                eps_rel: s.eps_rel,
            },
            None => SolverSettings::default(),
        }
    }

    pub fn controller(&self, lambda: &MomentMatrices) -> Result<Controller> {
        Controller::new(
            &self.model,
            &self.constraint,
            &self.noise,
            &self.cost,
            &self.saturator,
            lambda,
            self.solver_settings(),
        )
    }

    pub fn simulation_settings(&self) -> SimulationSettings {
        let s = &self.config.sim;
        SimulationSettings {
            mode: s.mode,
            steps: s.steps,
            trials: s.trials,
            seed: s.seed,
            x0: s.x0.clone(),
            index: IndexSpec {
                convention: s.index,
                include_terminal: s.include_terminal,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips_and_builds() {
        let cfg = RunConfig::paper_preset();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        let p = Problem::new(back).unwrap();
        assert!(p.diagnostics.is_schur);
        assert_eq!(p.horizon(), 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::paper_preset()).unwrap();
        v["constraint"]["extra"] = Value::from(1.0);
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn saturator_params() {
        let cfg = SaturatorConfig {
            kind: "scaled_sigmoid".into(),
            params: serde_json::json!({"magnitude": 5.0, "slope": 1.0}),
        };
        assert_eq!(
            saturator_kind(&cfg).unwrap(),
            SaturatorKind::ScaledSigmoid {
                magnitude: 5.0,
                slope: 1.0
            }
        );
    }

    #[test]
    fn nonzero_mean_moves_into_offset() {
        let mut cfg = RunConfig::paper_preset();
        cfg.noise.mean = vec![1.0, 0.0, 0.0];
        let p = Problem::new(cfg).unwrap();
        assert_eq!(p.model.r()[0], 1.0);
        assert!(p.noise.is_zero_mean());
    }
}

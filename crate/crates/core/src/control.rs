//! Closed-loop execution of the saturated disturbance-feedback policy.
//!
//! MPC re-solves at every step and applies `d̄*₀`. RHC solves once per block of
//! `N` steps and feeds the saturated reconstructed noise back through `Ḡ*`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::batch::{build_batch, BatchMatrices};
use crate::error::{Error, Result};
use crate::model::{CostSpec, InputConstraint, NoiseModel, SystemModel};
use crate::moments::{MomentMatrices, Saturator};
use crate::qp::{assemble, reformulate_epigraph, solve_reformulated, PolicyParameters, QpProblem, SolverSettings, StandardQp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Mpc,
    Rhc,
}

impl std::str::FromStr for ControlMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpc" => Ok(ControlMode::Mpc),
            "rhc" => Ok(ControlMode::Rhc),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected mpc or rhc)"))),
        }
    }
}

/// `F w_t = x_{t+1} − A x_t − B u_t − r`.
pub fn reconstruct_noise(x_next: &DVector<f64>, x: &DVector<f64>, u: &DVector<f64>, model: &SystemModel) -> DVector<f64> {
    x_next - model.a() * x - model.b() * u - model.r()
}

/// Everything needed to solve the policy program at a new initial state.
///
/// The Hessian and constraints do not depend on the state, so they are built
/// once and only the linear term is refreshed per solve.
#[derive(Debug, Clone)]
pub struct Controller {
    model: SystemModel,
    saturator: Saturator,
    batch: BatchMatrices,
    qp: QpProblem,
    standard: StandardQp,
    settings: SolverSettings,
}

impl Controller {
    pub fn new(
        model: &SystemModel,
        constraint: &InputConstraint,
        noise: &NoiseModel,
        cost: &CostSpec,
        saturator: &Saturator,
        lambda: &MomentMatrices,
        settings: SolverSettings,
    ) -> Result<Self> {
        if saturator.phi_max() > constraint.phi_max() * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "saturator bound {} exceeds phi_max {}",
                saturator.phi_max(),
                constraint.phi_max()
            )));
        }
        let batch = build_batch(model, cost)?;
        let qp = assemble(&batch, &DVector::zeros(model.n()), noise, lambda, constraint)?;
        let standard = reformulate_epigraph(&qp);
        Ok(Controller {
            model: model.clone(),
            saturator: saturator.clone(),
            batch,
            qp,
            standard,
            settings,
        })
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }
    pub fn saturator(&self) -> &Saturator {
        &self.saturator
    }
    pub fn horizon(&self) -> usize {
        self.batch.horizon
    }
    pub fn batch(&self) -> &BatchMatrices {
        &self.batch
    }
    /// Problem data at the most recent solve state.
    pub fn problem(&self) -> &QpProblem {
        &self.qp
    }

    /// Optimal `(Ḡ*, d̄*)` for initial state `x0`.
    pub fn solve_at(&mut self, x0: &DVector<f64>) -> Result<PolicyParameters> {
        self.qp.set_initial_state(&self.batch, x0)?;
        self.standard.set_d_linear(&self.qp.b);
        solve_reformulated(&self.qp, &self.standard, &self.settings)
    }

    /// MPC input `u_t = d̄*_{0|t}`.
    pub fn mpc_step(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let policy = self.solve_at(x)?;
        let m = self.model.m();
        Ok(policy.d_bar.rows(0, m).into_owned())
    }

    pub fn rhc_plan(&mut self, x: &DVector<f64>) -> Result<PolicyParameters> {
        self.solve_at(x)
    }
}

/// `u_ℓ = d*_ℓ + Σ_{i<ℓ} G_{ℓ,i} φ(Fw_i)` for one step inside an RHC block.
pub fn rhc_input(policy: &PolicyParameters, step: usize, history: &[DVector<f64>], saturator: &Saturator, n: usize, m: usize) -> Result<DVector<f64>> {
    if history.len() != step {
        return Err(Error::Dimension(format!(
            "rhc step {step} needs {step} reconstructed noise vectors, got {}",
            history.len()
        )));
    }
    if (step + 1) * m > policy.d_bar.len() {
        return Err(Error::Dimension(format!("rhc step {step} lies beyond the planning horizon")));
    }
    let mut u = policy.d_bar.rows(step * m, m).into_owned();
    for (i, fw) in history.iter().enumerate() {
        if fw.len() != n {
            return Err(Error::Dimension("reconstructed noise has wrong length".into()));
        }
        let block = policy.g_bar.view((step * m, i * n), (m, n));
        u += block * saturator.apply(fw);
    }
    Ok(u)
}

/// Per-trajectory controller state.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub mode: ControlMode,
    pub policy: Option<PolicyParameters>,
    pub block_start: Option<DVector<f64>>,
    pub history: Vec<DVector<f64>>,
    pub step: usize,
}

impl ControllerState {
    pub fn new(mode: ControlMode) -> Self {
        ControllerState {
            mode,
            policy: None,
            block_start: None,
            history: Vec::new(),
            step: 0,
        }
    }

    /// Input to apply at state `x`.
    pub fn act(&mut self, ctrl: &mut Controller, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self.mode {
            ControlMode::Mpc => ctrl.mpc_step(x),
            ControlMode::Rhc => {
                if self.step == 0 {
                    self.policy = Some(ctrl.rhc_plan(x)?);
                    self.block_start = Some(x.clone());
                    self.history.clear();
                }
                let policy = self.policy.as_ref().expect("policy planned at block start");
                let (n, m) = (ctrl.model.n(), ctrl.model.m());
                rhc_input(policy, self.step, &self.history, &ctrl.saturator, n, m)
            }
        }
    }

    /// Records the transition and returns the reconstructed `Fw`.
    pub fn observe(&mut self, ctrl: &Controller, x: &DVector<f64>, u: &DVector<f64>, x_next: &DVector<f64>) -> DVector<f64> {
        let fw = reconstruct_noise(x_next, x, u, &ctrl.model);
        if self.mode == ControlMode::Rhc {
            self.history.push(fw.clone());
            self.step += 1;
            if self.step == ctrl.horizon() {
                self.step = 0;
            }
        }
        fw
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::MomentMode;
    use nalgebra::DMatrix;

    fn setup(horizon: usize) -> (SystemModel, Controller) {
        let model = SystemModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
        )
        .unwrap();
        let noise = NoiseModel::zero_mean(DVector::from_element(2, 1.0)).unwrap();
        let cost = CostSpec::constant(DMatrix::identity(2, 2), DMatrix::identity(1, 1), horizon).unwrap();
        let lambda = MomentMatrices::scaled_identity(MomentMode::Quadrature, 2, horizon, 0.4, 0.5).unwrap();
        let ctrl = Controller::new(
            &model,
            &InputConstraint::new(1.0, 1.0).unwrap(),
            &noise,
            &cost,
            &Saturator::standard_sigmoid(),
            &lambda,
            SolverSettings::default(),
        )
        .unwrap();
        (model, ctrl)
    }

    #[test]
    fn origin_gives_zero_input() {
        let (_, mut ctrl) = setup(3);
        let u = ctrl.mpc_step(&DVector::zeros(2)).unwrap();
        assert!(u.amax() < 1e-8);
    }

    #[test]
    fn rhc_first_step_ignores_noise_and_zero_noise_gives_d() {
        let (_, mut ctrl) = setup(3);
        let policy = ctrl.rhc_plan(&DVector::from_row_slice(&[5.0, -3.0])).unwrap();
        let sat = Saturator::standard_sigmoid();
        let u0 = rhc_input(&policy, 0, &[], &sat, 2, 1).unwrap();
        assert_eq!(u0[0], policy.d_bar[0]);
        let zeros = vec![DVector::zeros(2); 2];
        let u2 = rhc_input(&policy, 2, &zeros, &sat, 2, 1).unwrap();
        assert_eq!(u2[0], policy.d_bar[2]);
        assert!(rhc_input(&policy, 2, &zeros[..1], &sat, 2, 1).is_err());
    }

    #[test]
    fn reconstruction_round_trip() {
        let (model, _) = setup(2);
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        let u = DVector::from_row_slice(&[0.3]);
        let w = DVector::from_row_slice(&[-0.7, 0.25]);
        let x_next = model.step(&x, &u, &w);
        assert!((reconstruct_noise(&x_next, &x, &u, &model) - w).amax() < 1e-14);
    }

    #[test]
    fn rhc_with_unit_horizon_matches_mpc() {
        let (_, mut ctrl) = setup(1);
        let x = DVector::from_row_slice(&[4.0, -1.0]);
        let mut state = ControllerState::new(ControlMode::Rhc);
        let u_rhc = state.act(&mut ctrl, &x).unwrap();
        let u_mpc = ctrl.mpc_step(&x).unwrap();
        assert_eq!(u_rhc, u_mpc);
    }
}

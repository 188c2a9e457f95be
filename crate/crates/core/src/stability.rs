//! Foster–Lyapunov drift certificates for the closed loop.
//!
//! With `V(x) = xᵀPx` and `AᵀPA − P = −I`, bounded inputs give
//! `E[V(x₁) | x₀ = x] ≤ V(x) − ‖x‖² + 2c₁‖x‖∞ + c₂`, hence geometric drift
//! outside the box `‖x‖∞ ≤ r` and a uniform bound on `E‖x_t‖²`.
//!
//! Matrix norms in `c₁, c₂` are max absolute column sums, multiplied by the
//! number of columns; this is what makes `|xᵀMu| ≤ ‖x‖∞ · cols · ‖M‖ · U` hold.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::batch::build_batch;
use crate::error::{Error, Result};
use crate::model::{spectral_radius, CostSpec, InputConstraint, NoiseModel, SystemModel, SCHUR_MARGIN};
use crate::moments::MomentMatrices;
use crate::sim::SimulationSummary;

pub const LYAPUNOV_TOL: f64 = 1e-8;
pub const THETA_GRID: usize = 100;

/// Solves `MᵀPM − P = −I` through `(I − Mᵀ⊗Mᵀ) vec P = vec I`.
pub fn solve_discrete_lyapunov(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if !m.is_square() {
        return Err(Error::Dimension("lyapunov matrix must be square".into()));
    }
    let rho = spectral_radius(m);
    if rho >= 1.0 - SCHUR_MARGIN {
        return Err(Error::NotCertifiable(format!("matrix is not Schur stable (spectral radius {rho})")));
    }
    let mt = m.transpose();
    let kron = mt.kronecker(&mt);
    let system = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_iterator(n * n, DMatrix::<f64>::identity(n, n).iter().copied());
    let vec_p = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("lyapunov system is singular"))?;
    let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    let p = 0.5 * (&p + p.transpose());
    let residual = lyapunov_residual(m, &p);
    if residual > LYAPUNOV_TOL {
        return Err(Error::Numerical {
            message: "lyapunov residual above tolerance".into(),
            estimate: None,
            error: Some(residual),
        });
    }
    Ok(p)
}

/// `‖MᵀPM − P + I‖∞` (largest absolute entry).
pub fn lyapunov_residual(m: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    (m.transpose() * p * m - p + DMatrix::<f64>::identity(n, n)).amax()
}

fn col_sum_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn eig_extremes(p: &DMatrix<f64>) -> (f64, f64) {
    let e = p.clone().symmetric_eigen().eigenvalues;
    (e.min(), e.max())
}

/// Drift constants `c₁, c₂` of one transition `x ↦ Mx + Bu + Dv` with
/// `‖u‖∞ ≤ U`, `v` Gaussian with mean `mean_v` and covariance `cov_v`, and an
/// additive constant `d0`, all seen through `V = xᵀPx`.
struct DriftTerms {
    c1: f64,
    c2: f64,
}

#[allow(clippy::too_many_arguments)]
fn drift_terms(
    m: &DMatrix<f64>,
    p: &DMatrix<f64>,
    b: &DMatrix<f64>,
    noise_map: &DMatrix<f64>,
    offset: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    u_max: f64,
) -> DriftTerms {
    let cols = b.ncols() as f64;
    let shift = noise_map * mean + offset;
    let mtp = m.transpose() * p;
    let c1 = (&mtp * &shift).lp_norm(1) + cols * col_sum_norm(&(&mtp * b)) * u_max;
    let btp = b.transpose() * p;
    let noise_mean = noise_map * mean;
    let c2 = offset.dot(&(p * offset))
        + 2.0 * (&btp * &shift).lp_norm(1) * u_max
        + cols * col_sum_norm(&(&btp * b)) * u_max * u_max
        + 2.0 * offset.dot(&(p * &noise_mean)).abs()
        + noise_mean.dot(&(p * &noise_mean))
        + (noise_map.transpose() * p * noise_map * cov).trace();
    DriftTerms { c1, c2 }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DriftParameters {
    pub theta: f64,
    pub radius: f64,
    pub lambda: f64,
    pub b: f64,
}

/// `r, λ, b` for a given `θ`.
pub fn drift_parameters(c1: f64, c2: f64, theta: f64, lambda_max_p: f64, n: usize) -> DriftParameters {
    let radius = (c1 + (c1 * c1 + c2 * theta).sqrt()) / theta;
    let lambda = 1.0 - (1.0 - theta) / lambda_max_p;
    let b = lambda_max_p * n as f64 * radius * radius + 2.0 * c1 * radius + c2;
    DriftParameters {
        theta,
        radius,
        lambda,
        b,
    }
}

/// Log-spaced `θ` in `(max(0, 1 − λmax P), 1)` minimizing `b / (1 − λ)`.
pub fn choose_theta(c1: f64, c2: f64, lambda_max_p: f64, n: usize) -> DriftParameters {
    let lo = (1.0 - lambda_max_p).max(0.0);
    let width = 1.0 - lo;
    let (g0, g1) = (1e-4_f64, 1.0 - 1e-4);
    let mut best: Option<(f64, DriftParameters)> = None;
    for k in 0..THETA_GRID {
        let g = g0 * (g1 / g0).powf(k as f64 / (THETA_GRID - 1) as f64);
        let theta = lo + width * g;
        let d = drift_parameters(c1, c2, theta, lambda_max_p, n);
        let score = d.b / (1.0 - d.lambda);
        if d.lambda > 0.0 && d.lambda < 1.0 && best.is_none_or(|(s, _)| score < s) {
            best = Some((score, d));
        }
    }
    best.expect("theta grid has admissible points").1
}

#[derive(Debug, Clone)]
pub struct DriftCertificate {
    pub p: DMatrix<f64>,
    pub lambda_min_p: f64,
    pub lambda_max_p: f64,
    pub lyapunov_residual: f64,
    pub c1: f64,
    pub c2: f64,
    pub theta: f64,
    pub radius: f64,
    pub lambda: f64,
    pub b: f64,
}

impl DriftCertificate {
    /// `E V(x_t) ≤ λᵗ V̄₀ + b(1 − λᵗ)/(1 − λ)`.
    pub fn value_bound(&self, t: usize, v0: f64) -> f64 {
        let lt = self.lambda.powi(t as i32);
        lt * v0 + self.b * (1.0 - lt) / (1.0 - self.lambda)
    }

    /// Bound on `E‖x_t‖²` given `E[x₀x₀ᵀ]`.
    pub fn moment_bound(&self, t: usize, x0_second_moment: &DMatrix<f64>) -> f64 {
        let v0 = (&self.p * x0_second_moment).trace();
        self.value_bound(t, v0) / self.lambda_min_p
    }

    pub fn supremum_bound(&self, x0_second_moment: &DMatrix<f64>) -> f64 {
        let v0 = (&self.p * x0_second_moment).trace();
        v0.max(self.b / (1.0 - self.lambda)) / self.lambda_min_p
    }
}

pub fn mpc_drift_constants(
    model: &SystemModel,
    constraint: &InputConstraint,
    noise: &NoiseModel,
    p: &DMatrix<f64>,
) -> Result<DriftCertificate> {
    let n = model.n();
    if p.shape() != (n, n) || noise.dim() != n {
        return Err(Error::Dimension("P and noise must match the state dimension".into()));
    }
    let (lmin, lmax) = eig_extremes(p);
    if lmin <= 0.0 {
        return Err(Error::NotCertifiable("P is not positive definite".into()));
    }
    let terms = drift_terms(
        model.a(),
        p,
        model.b(),
        model.f(),
        model.r(),
        noise.mean(),
        &noise.covariance(),
        constraint.u_max(),
    );
    let d = choose_theta(terms.c1, terms.c2, lmax, n);
    Ok(DriftCertificate {
        p: p.clone(),
        lambda_min_p: lmin,
        lambda_max_p: lmax,
        lyapunov_residual: lyapunov_residual(model.a(), p),
        c1: terms.c1,
        c2: terms.c2,
        theta: d.theta,
        radius: d.radius,
        lambda: d.lambda,
        b: d.b,
    })
}

/// Solves for `P` and builds the MPC certificate; non-Schur `A` is not certifiable.
pub fn mpc_certificate(model: &SystemModel, constraint: &InputConstraint, noise: &NoiseModel) -> Result<DriftCertificate> {
    let p = solve_discrete_lyapunov(model.a())?;
    mpc_drift_constants(model, constraint, noise, &p)
}

/// Constants for one lookahead `ℓ` of the RHC block.
#[derive(Debug, Clone)]
pub struct RhcStep {
    pub step: usize,
    pub p: DMatrix<f64>,
    pub lambda_min_p: f64,
    pub lambda_max_p: f64,
    pub lyapunov_residual: f64,
    pub c1: f64,
    pub c2: f64,
    /// Bound on the `Ḡ`-dependent part of `c₂`.
    pub gain_term: f64,
    pub theta: f64,
    pub radius: f64,
    pub lambda: f64,
    pub b: f64,
}

#[derive(Debug, Clone)]
pub struct RhcCertificate {
    pub horizon: usize,
    pub steps: Vec<RhcStep>,
    /// Aggregates over `ℓ = 1..N−1`; `None` when `N = 1`.
    pub lambda_agg: Option<f64>,
    pub radius_prime: Option<f64>,
    pub lambda_bar: Option<f64>,
    pub lambda_under: Option<f64>,
    pub lambda_prime: Option<f64>,
    pub b_prime: Option<f64>,
    pub lambda_n: f64,
    pub radius_n: f64,
    /// `sup_{‖x‖∞ ≤ r_N} E V_N(x_N)`, over-approximated.
    pub b: f64,
}

/// `max(Nn, Nm)(U/φ)²‖B̄ᵀPB̄‖_F‖Λ₁‖_F + 2(U/φ)max(Nn, Nm)‖B̄ᵀPD̄F̄‖_F‖Λ₂‖_F`,
/// a bound on the `Ḡ`-terms over `‖Ḡ‖∞ ≤ U/φ`.
pub fn gain_term_bound(
    bpb: &DMatrix<f64>,
    bpdf: &DMatrix<f64>,
    lambda1: &DMatrix<f64>,
    lambda2: &DMatrix<f64>,
    gain_radius: f64,
    nn: usize,
    nm: usize,
) -> f64 {
    let k = nn.max(nm) as f64;
    k * gain_radius * gain_radius * bpb.norm() * lambda1.norm() + 2.0 * gain_radius * k * bpdf.norm() * lambda2.norm()
}

pub fn rhc_drift_constants(
    model: &SystemModel,
    constraint: &InputConstraint,
    noise: &NoiseModel,
    lambda: &MomentMatrices,
) -> Result<RhcCertificate> {
    let n = model.n();
    let horizon = lambda.horizon;
    let identity_cost = CostSpec::constant(DMatrix::identity(n, n), DMatrix::identity(model.m(), model.m()), horizon)?;
    let batch = build_batch(model, &identity_cost)?;
    let mean = noise.stacked_mean(horizon);
    let cov = noise.stacked_covariance(horizon);
    let gain_radius = constraint.u_max() / constraint.phi_max();
    let mut steps = Vec::with_capacity(horizon);
    for l in 1..=horizon {
        let blocks = batch.extract_step(l)?;
        let p = solve_discrete_lyapunov(&blocks.a_pow)?;
        let (lmin, lmax) = eig_extremes(&p);
        let noise_map = &blocks.d_l * &batch.f_bar;
        let offset = &blocks.d_l * &batch.r_bar;
        let terms = drift_terms(&blocks.a_pow, &p, &blocks.b_l, &noise_map, &offset, &mean, &cov, constraint.u_max());
        let bp = blocks.b_l.transpose() * &p;
        let gain_term = gain_term_bound(
            &(&bp * &blocks.b_l),
            &(&bp * &noise_map),
            &lambda.lambda1,
            &lambda.lambda2,
            gain_radius,
            horizon * n,
            horizon * model.m(),
        );
        let c2 = terms.c2 + gain_term;
        let d = choose_theta(terms.c1, c2, lmax, n);
        steps.push(RhcStep {
            step: l,
            lyapunov_residual: lyapunov_residual(&blocks.a_pow, &p),
            p,
            lambda_min_p: lmin,
            lambda_max_p: lmax,
            c1: terms.c1,
            c2,
            gain_term,
            theta: d.theta,
            radius: d.radius,
            lambda: d.lambda,
            b: d.b,
        });
    }
    let last = steps.last().expect("horizon >= 1");
    let (pn_min, pn_max) = (last.lambda_min_p, last.lambda_max_p);
    let inner = &steps[..horizon - 1];
    let (lambda_agg, radius_prime, lambda_bar, lambda_under, lambda_prime, b_prime) = if inner.is_empty() {
        (None, None, None, None, None, None)
    } else {
        let la = inner.iter().map(|s| s.lambda).fold(0.0, f64::max);
        let rp = inner.iter().map(|s| s.radius).fold(0.0, f64::max);
        let lb = inner.iter().map(|s| s.lambda_max_p).fold(0.0, f64::max);
        let lu = inner.iter().map(|s| s.lambda_min_p).fold(f64::INFINITY, f64::min);
        let lp = la * lb * pn_max / (lu * pn_min);
        // sup over ‖x‖∞ ≤ r′ of E V_N(x_ℓ), through V_N ≤ λmax(P_N)/λmin(P_ℓ) V_ℓ.
        let bp = inner
            .iter()
            .map(|s| pn_max / s.lambda_min_p * (s.lambda_max_p * n as f64 * rp * rp + 2.0 * s.c1 * rp + s.c2))
            .fold(0.0, f64::max);
        (Some(la), Some(rp), Some(lb), Some(lu), Some(lp), Some(bp))
    };
    Ok(RhcCertificate {
        horizon,
        lambda_n: last.lambda,
        radius_n: last.radius,
        b: last.b,
        steps,
        lambda_agg,
        radius_prime,
        lambda_bar,
        lambda_under,
        lambda_prime,
        b_prime,
    })
}

impl RhcCertificate {
    fn p_n(&self) -> &RhcStep {
        self.steps.last().expect("horizon >= 1")
    }

    /// Bound on `E V_N(x_t)` for `t = kN + ℓ`.
    pub fn value_bound(&self, t: usize, v0: f64) -> f64 {
        let k = t / self.horizon;
        let l = t % self.horizon;
        let lk = self.lambda_n.powi(k as i32);
        let block = lk * v0 + self.b * (1.0 - lk) / (1.0 - self.lambda_n);
        if l == 0 {
            block
        } else {
            self.lambda_prime.expect("l > 0 implies N > 1") * block + self.b_prime.expect("l > 0 implies N > 1")
        }
    }

    pub fn moment_bound(&self, t: usize, x0_second_moment: &DMatrix<f64>) -> f64 {
        let last = self.p_n();
        let v0 = (&last.p * x0_second_moment).trace();
        self.value_bound(t, v0) / last.lambda_min_p
    }

    /// `(λ′ max(V_N, b/(1−λ_N)) + b′) / λmin(P_N)`, valid for every `t`.
    pub fn supremum_bound(&self, x0_second_moment: &DMatrix<f64>) -> f64 {
        let last = self.p_n();
        let v0 = (&last.p * x0_second_moment).trace();
        let block = v0.max(self.b / (1.0 - self.lambda_n));
        let value = match (self.lambda_prime, self.b_prime) {
            (Some(lp), Some(bp)) => block.max(lp * block + bp),
            _ => block,
        };
        value / last.lambda_min_p
    }
}

#[derive(Debug, Clone)]
pub enum Certificate {
    Mpc(DriftCertificate),
    Rhc(RhcCertificate),
}

impl Certificate {
    pub fn moment_bound(&self, t: usize, x0_second_moment: &DMatrix<f64>) -> f64 {
        match self {
            Certificate::Mpc(c) => c.moment_bound(t, x0_second_moment),
            Certificate::Rhc(c) => c.moment_bound(t, x0_second_moment),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NoCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub status: CheckStatus,
    /// `max_t empirical / bound`.
    pub max_ratio: f64,
    /// First step where `empirical > bound + 4 SE`.
    pub first_violation: Option<usize>,
    pub bounds: Vec<f64>,
}

/// Compares the per-step empirical `E‖x_t‖²` against the certificate.
pub fn empirical_variance_check(summary: &SimulationSummary, cert: Option<&Certificate>) -> VarianceReport {
    let Some(cert) = cert else {
        return VarianceReport {
            status: CheckStatus::NoCertificate,
            max_ratio: f64::NAN,
            first_violation: None,
            bounds: Vec::new(),
        };
    };
    let s0 = summary.initial_second_moment_matrix();
    let bounds: Vec<f64> = (0..summary.mean_sq_norm.len()).map(|t| cert.moment_bound(t, &s0)).collect();
    let mut max_ratio: f64 = 0.0;
    let mut first_violation = None;
    for (t, (&emp, &bound)) in summary.mean_sq_norm.iter().zip(&bounds).enumerate() {
        if bound > 0.0 {
            max_ratio = max_ratio.max(emp / bound);
        } else if emp > 0.0 {
            max_ratio = f64::INFINITY;
        }
        if first_violation.is_none() && emp > bound + 4.0 * summary.sq_norm_std_error[t] {
            first_violation = Some(t);
        }
    }
    VarianceReport {
        status: if first_violation.is_none() { CheckStatus::Pass } else { CheckStatus::Fail },
        max_ratio,
        first_violation,
        bounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_and_zero_lyapunov() {
        let p = solve_discrete_lyapunov(&DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        let p0 = solve_discrete_lyapunov(&DMatrix::zeros(2, 2)).unwrap();
        assert!((p0 - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
        assert!(matches!(
            solve_discrete_lyapunov(&DMatrix::identity(2, 2)),
            Err(Error::NotCertifiable(_))
        ));
    }

    fn scalar_model() -> SystemModel {
        SystemModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn scalar_constants() {
        let model = scalar_model();
        let c = InputConstraint::new(1.0, 1.0).unwrap();
        let p = DMatrix::from_element(1, 1, 4.0 / 3.0);
        let zero = mpc_drift_constants(&model, &c, &NoiseModel::zero_mean(DVector::zeros(1)).unwrap(), &p).unwrap();
        assert!((zero.c1 - 2.0 / 3.0).abs() < 1e-15);
        let unit = mpc_drift_constants(&model, &c, &NoiseModel::zero_mean(DVector::from_element(1, 1.0)).unwrap(), &p).unwrap();
        assert!((unit.c2 - 8.0 / 3.0).abs() < 1e-14);
        assert!(unit.lambda > 0.0 && unit.lambda < 1.0);
    }

    #[test]
    fn radius_solves_the_quadratic() {
        let d = drift_parameters(0.7, 2.0, 0.3, 2.0, 2);
        let q = -0.3 * d.radius * d.radius + 2.0 * 0.7 * d.radius + 2.0;
        assert!(q.abs() < 1e-12);
    }

    #[test]
    fn unit_horizon_rhc_matches_mpc() {
        let model = scalar_model();
        let c = InputConstraint::new(1.0, 1.0).unwrap();
        let noise = NoiseModel::zero_mean(DVector::from_element(1, 1.0)).unwrap();
        let lambda = MomentMatrices::scaled_identity(crate::moments::MomentMode::Quadrature, 1, 1, 0.5, 0.5).unwrap();
        let rhc = rhc_drift_constants(&model, &c, &noise, &lambda).unwrap();
        let mpc = mpc_certificate(&model, &c, &noise).unwrap();
        let s = &rhc.steps[0];
        assert!((s.c1 - mpc.c1).abs() < 1e-14);
        assert!((s.c2 - s.gain_term - mpc.c2).abs() < 1e-13);
        assert!(rhc.lambda_prime.is_none());
    }
}

//! Plant, input bound, noise and cost specifications.
//!
//! All types validate on construction and are immutable afterwards.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Spectral radii at or above `1 - SCHUR_MARGIN` are treated as not Schur stable.
pub const SCHUR_MARGIN: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-12;

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} has non-finite entries")))
    }
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Checks symmetry within a relative `1e-12` and returns the smallest eigenvalue.
pub(crate) fn symmetric_min_eigenvalue(name: &str, q: &DMatrix<f64>) -> Result<f64> {
    if !q.is_square() {
        return Err(Error::Dimension(format!("{name} must be square")));
    }
    let scale = q.amax().max(1.0);
    for i in 0..q.nrows() {
        for j in 0..i {
            if (q[(i, j)] - q[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidInput(format!("{name} is not symmetric")));
            }
        }
    }
    let eig = q.clone().symmetric_eigen();
    Ok(eig.eigenvalues.min())
}

/// The affine plant `x+ = A x + B u + F w + r`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    f: DMatrix<f64>,
    r: DVector<f64>,
    spectral_radius: f64,
}

impl SystemModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, f: DMatrix<f64>, r: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if f.nrows() != n || f.ncols() != n {
            return Err(Error::Dimension(format!(
                "F must be {n}x{n}, got {}x{}",
                f.nrows(),
                f.ncols()
            )));
        }
        if r.len() != n {
            return Err(Error::Dimension(format!("r must have length {n}, got {}", r.len())));
        }
        check_finite("A", a.as_slice())?;
        check_finite("B", b.as_slice())?;
        check_finite("F", f.as_slice())?;
        check_finite("r", r.as_slice())?;
        let spectral_radius = spectral_radius(&a);
        Ok(SystemModel {
            a,
            b,
            f,
            r,
            spectral_radius,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }
    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }
    pub fn is_schur(&self) -> bool {
        self.spectral_radius < 1.0 - SCHUR_MARGIN
    }

    /// One step of the plant for a given input and noise realization.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.f * w + &self.r
    }
}

/// Element-wise input bound `|u_i| <= u_max` and the saturator bound used in
/// the row constraints of the policy QP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InputConstraint {
    u_max: f64,
    phi_max: f64,
}

impl InputConstraint {
    pub fn new(u_max: f64, phi_max: f64) -> Result<Self> {
        if !(u_max.is_finite() && phi_max.is_finite()) || phi_max <= 0.0 || phi_max > u_max {
            return Err(Error::InvalidInput(format!(
                "input constraint requires 0 < phi_max <= u_max, got phi_max={phi_max}, u_max={u_max}"
            )));
        }
        Ok(InputConstraint { u_max, phi_max })
    }
    pub fn u_max(&self) -> f64 {
        self.u_max
    }
    pub fn phi_max(&self) -> f64 {
        self.phi_max
    }
}

/// I.i.d. Gaussian noise with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    mean: DVector<f64>,
    cov_diag: DVector<f64>,
}

impl NoiseModel {
    pub fn new(mean: DVector<f64>, cov_diag: DVector<f64>) -> Result<Self> {
        if mean.len() != cov_diag.len() || mean.is_empty() {
            return Err(Error::Dimension(format!(
                "noise mean has length {}, covariance diagonal has length {}",
                mean.len(),
                cov_diag.len()
            )));
        }
        check_finite("noise mean", mean.as_slice())?;
        check_finite("noise covariance", cov_diag.as_slice())?;
        if cov_diag.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("noise variances must be nonnegative".into()));
        }
        Ok(NoiseModel { mean, cov_diag })
    }

    pub fn zero_mean(cov_diag: DVector<f64>) -> Result<Self> {
        let n = cov_diag.len();
        NoiseModel::new(DVector::zeros(n), cov_diag)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov_diag(&self) -> &DVector<f64> {
        &self.cov_diag
    }
    pub fn std_dev(&self, i: usize) -> f64 {
        self.cov_diag[i].sqrt()
    }
    pub fn is_zero_mean(&self) -> bool {
        self.mean.iter().all(|&v| v == 0.0)
    }
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.cov_diag)
    }

    /// Mean of the stacked horizon noise vector.
    pub fn stacked_mean(&self, horizon: usize) -> DVector<f64> {
        let n = self.dim();
        DVector::from_fn(n * horizon, |k, _| self.mean[k % n])
    }

    /// Covariance of the stacked horizon noise vector (block diagonal).
    pub fn stacked_covariance(&self, horizon: usize) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_diagonal(&DVector::from_fn(n * horizon, |k, _| self.cov_diag[k % n]))
    }
}

/// Stage weights `Q_0..Q_N` and `R_0..R_{N-1}`.
#[derive(Debug, Clone)]
pub struct CostSpec {
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
}

impl CostSpec {
    pub fn new(q: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>) -> Result<Self> {
        if r.is_empty() {
            return Err(Error::InvalidInput("horizon N must be at least 1".into()));
        }
        if q.len() != r.len() + 1 {
            return Err(Error::Dimension(format!(
                "expected N+1 = {} state weights, got {}",
                r.len() + 1,
                q.len()
            )));
        }
        let n = q[0].nrows();
        let m = r[0].nrows();
        for (t, qt) in q.iter().enumerate() {
            if qt.nrows() != n || qt.ncols() != n {
                return Err(Error::Dimension(format!("Q_{t} must be {n}x{n}")));
            }
            check_finite("Q", qt.as_slice())?;
            let min = symmetric_min_eigenvalue(&format!("Q_{t}"), qt)?;
            if min <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "Q_{t} is not positive definite (min eigenvalue {min:e})"
                )));
            }
        }
        for (t, rt) in r.iter().enumerate() {
            if rt.nrows() != m || rt.ncols() != m {
                return Err(Error::Dimension(format!("R_{t} must be {m}x{m}")));
            }
            check_finite("R", rt.as_slice())?;
            let min = symmetric_min_eigenvalue(&format!("R_{t}"), rt)?;
            if min <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "R_{t} is not positive definite (min eigenvalue {min:e})"
                )));
            }
        }
        Ok(CostSpec { q, r })
    }

    /// The same `Q` and `R` at every stage.
    pub fn constant(q: DMatrix<f64>, r: DMatrix<f64>, horizon: usize) -> Result<Self> {
        CostSpec::new(vec![q; horizon + 1], vec![r; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.r.len()
    }
    pub fn q(&self, t: usize) -> &DMatrix<f64> {
        &self.q[t]
    }
    pub fn r(&self, t: usize) -> &DMatrix<f64> {
        &self.r[t]
    }
    pub fn state_dim(&self) -> usize {
        self.q[0].nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.r[0].nrows()
    }
}

/// Rewrites `x+ = A x + B_hat v + F w_hat + r_hat` with `v = S u + l` into the
/// normalized form with a box input set and zero-mean noise.
pub fn normalize_affine(
    a: DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    f: DMatrix<f64>,
    r_hat: &DVector<f64>,
    s: &DMatrix<f64>,
    l: &DVector<f64>,
    noise_hat: &NoiseModel,
) -> Result<(SystemModel, NoiseModel)> {
    let m = b_hat.ncols();
    if s.nrows() != m || s.ncols() != m || l.len() != m {
        return Err(Error::Dimension(format!(
            "input transform must be {m}x{m} with offset of length {m}"
        )));
    }
    if f.ncols() != noise_hat.dim() {
        return Err(Error::Dimension("F and noise dimensions disagree".into()));
    }
    let sv = s.clone().singular_values();
    if sv.min() <= 1e-12 * sv.max() || sv.max() == 0.0 {
        return Err(Error::InvalidInput("input-set transform not invertible".into()));
    }
    let b = b_hat * s;
    let r = b_hat * l + r_hat + &f * noise_hat.mean();
    let noise = NoiseModel::zero_mean(noise_hat.cov_diag().clone())?;
    Ok((SystemModel::new(a, b, f, r)?, noise))
}

/// Outcome of [`validate`]. Hard violations are returned as errors instead.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub is_schur: bool,
    pub spectral_radius: f64,
    pub warnings: Vec<String>,
}

/// Cross-checks the specifications against each other.
pub fn validate(
    model: &SystemModel,
    constraint: &InputConstraint,
    noise: &NoiseModel,
    cost: &CostSpec,
) -> Result<Diagnostics> {
    let (n, m) = (model.n(), model.m());
    if noise.dim() != n {
        return Err(Error::Dimension(format!(
            "noise dimension {} does not match state dimension {n}",
            noise.dim()
        )));
    }
    if cost.state_dim() != n || cost.input_dim() != m {
        return Err(Error::Dimension(format!(
            "cost weights are {}x{} / {}x{}, model has n={n}, m={m}",
            cost.state_dim(),
            cost.state_dim(),
            cost.input_dim(),
            cost.input_dim()
        )));
    }
    let _ = constraint;
    let mut warnings = Vec::new();
    if !model.is_schur() {
        warnings.push(format!(
            "A is not Schur stable (spectral radius {:.12}); stability certificates unavailable",
            model.spectral_radius()
        ));
    }
    if !noise.is_zero_mean() {
        warnings.push("noise has nonzero mean; consider normalize_affine".into());
    }
    Ok(Diagnostics {
        is_schur: model.is_schur(),
        spectral_radius: model.spectral_radius(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_a() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.01, 0.3, 0.3, 0.06, 0.09, 0.02, 0.5])
    }

    fn paper_model() -> SystemModel {
        SystemModel::new(
            paper_a(),
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 0.5]),
            DMatrix::identity(3, 3),
            DVector::zeros(3),
        )
        .unwrap()
    }

    fn power_iteration_radius(a: &DMatrix<f64>) -> f64 {
        // ||A^k||^(1/k) converges to the spectral radius.
        let mut p = DMatrix::<f64>::identity(a.nrows(), a.nrows());
        let k = 400;
        for _ in 0..k {
            p = a * p;
        }
        p.norm().powf(1.0 / k as f64)
    }

    #[test]
    fn paper_system_is_schur() {
        let model = paper_model();
        let noise = NoiseModel::zero_mean(DVector::from_element(3, 4.0)).unwrap();
        let cost = CostSpec::constant(
            DMatrix::identity(3, 3) * 3.0,
            DMatrix::identity(1, 1) * 2.0,
            6,
        )
        .unwrap();
        let c = InputConstraint::new(10.0, 5.0).unwrap();
        let d = validate(&model, &c, &noise, &cost).unwrap();
        assert!(d.is_schur);
        assert!(d.warnings.is_empty());
        let oracle = power_iteration_radius(&paper_a());
        assert!((oracle - model.spectral_radius()).abs() < 1e-2);
        assert!(oracle < 1.0);
    }

    #[test]
    fn identity_is_not_schur() {
        let model = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
        )
        .unwrap();
        let noise = NoiseModel::zero_mean(DVector::from_element(2, 1.0)).unwrap();
        let cost = CostSpec::constant(DMatrix::identity(2, 2), DMatrix::identity(1, 1), 2).unwrap();
        let d = validate(&model, &InputConstraint::new(1.0, 1.0).unwrap(), &noise, &cost).unwrap();
        assert!(!d.is_schur);
        assert!(d.warnings[0].contains("not Schur stable"));
    }

    #[test]
    fn indefinite_weight_is_rejected() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let err = CostSpec::constant(q, DMatrix::identity(1, 1), 3).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn dimension_mismatch_is_hard_error() {
        let model = paper_model();
        let noise = NoiseModel::zero_mean(DVector::from_element(2, 1.0)).unwrap();
        let cost = CostSpec::constant(DMatrix::identity(3, 3), DMatrix::identity(1, 1), 2).unwrap();
        let err = validate(&model, &InputConstraint::new(1.0, 1.0).unwrap(), &noise, &cost);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn constraint_requires_phi_below_u() {
        assert!(InputConstraint::new(1.0, 2.0).is_err());
        assert!(InputConstraint::new(1.0, 0.0).is_err());
        assert!(InputConstraint::new(10.0, 5.0).is_ok());
    }

    #[test]
    fn identity_transform_leaves_model_unchanged() {
        let base = paper_model();
        let noise = NoiseModel::zero_mean(DVector::from_element(3, 4.0)).unwrap();
        let (model, out) = normalize_affine(
            base.a().clone(),
            base.b(),
            base.f().clone(),
            base.r(),
            &DMatrix::identity(1, 1),
            &DVector::zeros(1),
            &noise,
        )
        .unwrap();
        assert_eq!(model.b(), base.b());
        assert_eq!(model.r(), base.r());
        assert_eq!(out, noise);
    }

    #[test]
    fn scaling_transform_doubles_b() {
        let base = paper_model();
        let noise = NoiseModel::zero_mean(DVector::from_element(3, 1.0)).unwrap();
        let (model, _) = normalize_affine(
            base.a().clone(),
            base.b(),
            base.f().clone(),
            base.r(),
            &(DMatrix::identity(1, 1) * 2.0),
            &DVector::zeros(1),
            &noise,
        )
        .unwrap();
        assert_eq!(model.b(), &(base.b() * 2.0));
        assert_eq!(model.r(), base.r());
    }

    #[test]
    fn noise_mean_shifts_into_r() {
        let base = paper_model();
        let mut mean = DVector::zeros(3);
        mean[0] = 1.0;
        let noise = NoiseModel::new(mean, DVector::from_element(3, 1.0)).unwrap();
        let (model, out) = normalize_affine(
            base.a().clone(),
            base.b(),
            DMatrix::identity(3, 3),
            base.r(),
            &DMatrix::identity(1, 1),
            &DVector::zeros(1),
            &noise,
        )
        .unwrap();
        assert_eq!(model.r()[0], 1.0);
        assert_eq!(model.r()[1], 0.0);
        assert!(out.is_zero_mean());
    }

    #[test]
    fn singular_transform_is_rejected() {
        let base = paper_model();
        let noise = NoiseModel::zero_mean(DVector::from_element(3, 1.0)).unwrap();
        let err = normalize_affine(
            base.a().clone(),
            base.b(),
            base.f().clone(),
            base.r(),
            &DMatrix::zeros(1, 1),
            &DVector::zeros(1),
            &noise,
        )
        .unwrap_err();
        assert!(err.to_string().contains("input-set transform not invertible"));
    }
}

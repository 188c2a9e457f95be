//! Saturators and the moment matrices `Λ₁ = E[φ(Fw)φ(Fw)ᵀ]`, `Λ₂ = E[φ(Fw)wᵀ]`.
//!
//! Three routes are provided side by side:
//!
//! * [`lambda_paper_form`] evaluates the published closed forms (sigmoid and
//!   saturation kinds). These do not agree with the true expectations; they
//!   exist to reproduce the published numerical example.
//! * [`lambda_quadrature`] integrates against the Gaussian density.
//! * [`lambda_monte_carlo`] averages over samples and reports standard errors.
//!
//! With `y = Fw` Gaussian, `Λ₂` follows from the one-dimensional expectation
//! `E[φ(y_j) y_j]` by Stein's lemma: `E[φ(y_j) w_k] = F_jk σ_k² / s_j² · E[φ(y_j) y_j]`
//! where `s_j²` is the variance of `y_j`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NoiseModel;
use crate::quad::{integrate, QuadSettings};
use crate::specfun::{erf, erfc, tricomi_u, upper_incomplete_gamma};

/// Gaussian integrals are truncated at this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 12.0;
pub const DEFAULT_QUAD_TOL: f64 = 1e-10;
pub const MIN_MC_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SaturatorKind {
    StandardSigmoid,
    /// `M α s / sqrt(1 + α² s²)`.
    ScaledSigmoid { magnitude: f64, slope: f64 },
    StandardSaturation,
    /// Breakpoints `(s, φ(s))` for `s >= 0`, starting at `(0, 0)`, extended
    /// oddly to negative `s` and flat beyond the last breakpoint.
    PiecewiseLinear { breakpoints: Vec<(f64, f64)> },
}

impl SaturatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            SaturatorKind::StandardSigmoid => "standard_sigmoid",
            SaturatorKind::ScaledSigmoid { .. } => "scaled_sigmoid",
            SaturatorKind::StandardSaturation => "standard_saturation",
            SaturatorKind::PiecewiseLinear { .. } => "piecewise_linear",
        }
    }
}

/// An odd, bounded scalar nonlinearity applied element-wise to reconstructed noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Saturator {
    kind: SaturatorKind,
    phi_max: f64,
}

impl Saturator {
    pub fn new(kind: SaturatorKind) -> Result<Self> {
        let phi_max = match &kind {
            SaturatorKind::StandardSigmoid | SaturatorKind::StandardSaturation => 1.0,
            SaturatorKind::ScaledSigmoid { magnitude, slope } => {
                if !(*magnitude > 0.0 && *slope > 0.0 && magnitude.is_finite() && slope.is_finite()) {
                    return Err(Error::InvalidInput(
                        "scaled sigmoid needs positive finite magnitude and slope".into(),
                    ));
                }
                *magnitude
            }
            SaturatorKind::PiecewiseLinear { breakpoints } => {
                if breakpoints.first() != Some(&(0.0, 0.0)) {
                    return Err(Error::InvalidInput(
                        "piecewise linear saturator must start at (0, 0)".into(),
                    ));
                }
                if breakpoints.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(Error::InvalidInput(
                        "piecewise linear breakpoints must be strictly increasing".into(),
                    ));
                }
                if breakpoints.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
                    return Err(Error::InvalidInput("non-finite breakpoint".into()));
                }
                let sup = breakpoints.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
                if sup == 0.0 {
                    return Err(Error::InvalidInput("piecewise linear saturator is identically zero".into()));
                }
                sup
            }
        };
        Ok(Saturator { kind, phi_max })
    }

    pub fn standard_sigmoid() -> Self {
        Saturator {
            kind: SaturatorKind::StandardSigmoid,
            phi_max: 1.0,
        }
    }

    pub fn standard_saturation() -> Self {
        Saturator {
            kind: SaturatorKind::StandardSaturation,
            phi_max: 1.0,
        }
    }

    pub fn kind(&self) -> &SaturatorKind {
        &self.kind
    }

    /// `sup_s |φ(s)|`.
    pub fn phi_max(&self) -> f64 {
        self.phi_max
    }

    pub fn evaluate(&self, s: f64) -> f64 {
        match &self.kind {
            SaturatorKind::StandardSigmoid => s / (1.0 + s * s).sqrt(),
            SaturatorKind::ScaledSigmoid { magnitude, slope } => {
                let t = slope * s;
                magnitude * t / (1.0 + t * t).sqrt()
            }
            SaturatorKind::StandardSaturation => s.signum() * s.abs().min(1.0),
            SaturatorKind::PiecewiseLinear { breakpoints } => {
                let x = s.abs();
                let v = match breakpoints.iter().position(|p| p.0 >= x) {
                    None => breakpoints[breakpoints.len() - 1].1,
                    Some(0) => breakpoints[0].1,
                    Some(i) => {
                        let (s0, v0) = breakpoints[i - 1];
                        let (s1, v1) = breakpoints[i];
                        v0 + (v1 - v0) * (x - s0) / (s1 - s0)
                    }
                };
                if s < 0.0 {
                    -v
                } else {
                    v
                }
            }
        }
    }

    /// Element-wise application to a vector.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        v.map(|s| self.evaluate(s))
    }

    /// Points in `(0, ∞)` where the saturator is not smooth.
    fn kinks(&self) -> Vec<f64> {
        match &self.kind {
            SaturatorKind::StandardSaturation => vec![1.0],
            SaturatorKind::PiecewiseLinear { breakpoints } => {
                breakpoints.iter().skip(1).map(|p| p.0).collect()
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    PaperForm,
    Quadrature,
    MonteCarlo,
}

/// Block-diagonal horizon moment matrices with per-entry error estimates
/// (absolute error bound for quadrature, standard error for Monte Carlo).
#[derive(Debug, Clone)]
pub struct MomentMatrices {
    pub mode: MomentMode,
    pub horizon: usize,
    /// n x n diagonal block of `Λ₁`.
    pub block1: DMatrix<f64>,
    /// n x n diagonal block of `Λ₂`.
    pub block2: DMatrix<f64>,
    pub error1: DMatrix<f64>,
    pub error2: DMatrix<f64>,
    pub lambda1: DMatrix<f64>,
    pub lambda2: DMatrix<f64>,
}

fn block_diagonal(block: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
    let n = block.nrows();
    let mut out = DMatrix::zeros(n * horizon, n * horizon);
    for t in 0..horizon {
        out.view_mut((t * n, t * n), (n, n)).copy_from(block);
    }
    out
}

impl MomentMatrices {
    pub fn from_blocks(
        mode: MomentMode,
        horizon: usize,
        block1: DMatrix<f64>,
        block2: DMatrix<f64>,
        error1: DMatrix<f64>,
        error2: DMatrix<f64>,
    ) -> Result<Self> {
        let n = block1.nrows();
        if !block1.is_square() || block2.shape() != (n, n) || horizon == 0 {
            return Err(Error::Dimension("moment blocks must be n x n with N >= 1".into()));
        }
        Ok(MomentMatrices {
            mode,
            horizon,
            lambda1: block_diagonal(&block1, horizon),
            lambda2: block_diagonal(&block2, horizon),
            block1,
            block2,
            error1,
            error2,
        })
    }

    /// `Λ₁ = l1 I`, `Λ₂ = l2 I` given directly, e.g. from a published table.
    pub fn scaled_identity(mode: MomentMode, n: usize, horizon: usize, l1: f64, l2: f64) -> Result<Self> {
        MomentMatrices::from_blocks(
            mode,
            horizon,
            DMatrix::identity(n, n) * l1,
            DMatrix::identity(n, n) * l2,
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
        )
    }

    pub fn n(&self) -> usize {
        self.block1.nrows()
    }
}

/// Per-coordinate standard deviations of `y = Fw` and the Stein factors
/// `F_jk σ_k² / s_j²`. Fails if the saturated coordinates are correlated.
fn projected_noise(f: &DMatrix<f64>, noise: &NoiseModel) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = noise.dim();
    if f.shape() != (n, n) {
        return Err(Error::Dimension("F must be n x n to match the noise".into()));
    }
    if !noise.is_zero_mean() {
        return Err(Error::InvalidInput(
            "moment closed forms and quadrature require zero-mean noise".into(),
        ));
    }
    let cov = f * noise.covariance() * f.transpose();
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    for j in 0..n {
        for l in 0..n {
            if j != l && cov[(j, l)].abs() > 1e-12 * scale {
                return Err(Error::InvalidInput(
                    "F Σ Fᵀ is not diagonal; saturated coordinates are correlated, use monte_carlo".into(),
                ));
            }
        }
    }
    let sd: Vec<f64> = (0..n).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let stein = DMatrix::from_fn(n, n, |j, k| {
        if sd[j] == 0.0 {
            0.0
        } else {
            f[(j, k)] * noise.cov_diag()[k] / (sd[j] * sd[j])
        }
    });
    Ok((sd, stein))
}

/// Printed closed form for `E[φ(w)²]` of the scaled sigmoid (`M = α = 1` is the standard sigmoid).
pub fn sigmoid_second_moment_paper(sigma: f64, magnitude: f64, slope: f64) -> Result<f64> {
    let s = sigma * slope;
    if s == 0.0 {
        return Ok(0.0);
    }
    let z = 1.0 / (SQRT_2 * s);
    Ok(magnitude * ((2.0 * PI).sqrt() * s - PI * (-0.5 / (s * s)).exp() * erfc(z)?))
}

/// `M (σα/√2) U(1/2, 0, 1/(2σ²α²))` as printed. This is `α E[φ(w) w]` for the
/// scaled sigmoid, so it is exact only for `α = 1`.
pub fn sigmoid_cross_moment_printed(sigma: f64, magnitude: f64, slope: f64) -> Result<f64> {
    let s = sigma * slope;
    if s == 0.0 {
        return Ok(0.0);
    }
    let u = tricomi_u(0.5, 0.0, 0.5 / (s * s))?.value;
    Ok(magnitude * s * FRAC_1_SQRT_2 * u)
}

/// `M (σα/√2) U(1/2, 0, σ²α²/2)`: the argument that reproduces the published
/// `Λ₂ = 0.7846` for `σ = 2`.
pub fn sigmoid_cross_moment_reported(sigma: f64, magnitude: f64, slope: f64) -> Result<f64> {
    let s = sigma * slope;
    if s == 0.0 {
        return Ok(0.0);
    }
    let u = tricomi_u(0.5, 0.0, 0.5 * s * s)?.value;
    Ok(magnitude * s * FRAC_1_SQRT_2 * u)
}

/// Printed closed forms `(ξ′, ξ″)` for the standard saturation.
pub fn saturation_moments_paper(sigma: f64) -> Result<(f64, f64)> {
    if sigma == 0.0 {
        // Limits of the printed expressions: erf(∞) = 1 in ξ′, σΓ(2σ², 1) -> 0 in ξ″.
        return Ok((2.0, 0.0));
    }
    let e = erf(1.0 / (SQRT_2 * sigma))?;
    let common = (2.0 * PI).sqrt() * sigma.powi(3) * e - 2.0 * sigma * sigma * (-0.5 / (sigma * sigma)).exp();
    let xi1 = common + 1.0 + e;
    let g = upper_incomplete_gamma(2.0 * sigma * sigma, 1.0)?.value;
    let xi2 = common + (2.0 / PI).sqrt() * sigma * g;
    Ok((xi1, xi2))
}

/// Closed-form moments as used for the published numerical example.
pub fn lambda_paper_form(
    sat: &Saturator,
    f: &DMatrix<f64>,
    noise: &NoiseModel,
    horizon: usize,
) -> Result<MomentMatrices> {
    let (sd, stein) = projected_noise(f, noise)?;
    let n = sd.len();
    let mut block1 = DMatrix::zeros(n, n);
    let mut cross = vec![0.0; n];
    for j in 0..n {
        let (l1, l2) = match sat.kind() {
            SaturatorKind::StandardSigmoid => (
                sigmoid_second_moment_paper(sd[j], 1.0, 1.0)?,
                sigmoid_cross_moment_reported(sd[j], 1.0, 1.0)?,
            ),
            SaturatorKind::ScaledSigmoid { magnitude, slope } => (
                sigmoid_second_moment_paper(sd[j], *magnitude, *slope)?,
                sigmoid_cross_moment_reported(sd[j], *magnitude, *slope)?,
            ),
            SaturatorKind::StandardSaturation => saturation_moments_paper(sd[j])?,
            other => return Err(Error::NoClosedForm(other.name().into())),
        };
        block1[(j, j)] = l1;
        cross[j] = l2;
    }
    let block2 = DMatrix::from_fn(n, n, |j, k| stein[(j, k)] * cross[j]);
    MomentMatrices::from_blocks(
        MomentMode::PaperForm,
        horizon,
        block1,
        block2,
        DMatrix::zeros(n, n),
        DMatrix::zeros(n, n),
    )
}

/// `(E[φ(y)²], E[φ(y) y])` and their error bounds for `y ~ N(0, s²)`.
pub fn gaussian_moments(sat: &Saturator, s: f64, tol: f64) -> Result<([f64; 2], [f64; 2])> {
    if s == 0.0 {
        return Ok(([0.0, 0.0], [0.0, 0.0]));
    }
    let norm = 1.0 / ((2.0 * PI).sqrt() * s);
    let pdf = move |t: f64| norm * (-0.5 * (t / s) * (t / s)).exp();
    let upper = TRUNCATION_SIGMAS * s;
    let mut cuts = vec![0.0];
    cuts.extend(sat.kinks().into_iter().filter(|&k| k > 0.0 && k < upper));
    cuts.push(upper);
    let settings = QuadSettings {
        abs_tol: 0.1 * tol / cuts.len() as f64,
        rel_tol: 0.0,
        max_intervals: 4000,
    };
    let mut values = [0.0; 2];
    let mut errors = [0.0; 2];
    for piece in cuts.windows(2) {
        let second = integrate(|t| sat.evaluate(t).powi(2) * pdf(t), piece[0], piece[1], settings)?;
        let cross = integrate(|t| t * sat.evaluate(t) * pdf(t), piece[0], piece[1], settings)?;
        values[0] += 2.0 * second.value;
        values[1] += 2.0 * cross.value;
        errors[0] += 2.0 * second.abs_error;
        errors[1] += 2.0 * cross.abs_error;
    }
    let tail_mass = erfc(TRUNCATION_SIGMAS * FRAC_1_SQRT_2)?;
    let phi2 = sat.phi_max() * sat.phi_max();
    if matches!(sat.kind(), SaturatorKind::StandardSaturation) && upper >= 1.0 {
        values[0] += tail_mass;
    } else {
        errors[0] += phi2 * tail_mass;
    }
    // E[|y|; |y| > 12 s] = 2 s pdf_std(12).
    let tail_abs = 2.0 * s * (-0.5 * TRUNCATION_SIGMAS * TRUNCATION_SIGMAS).exp() / (2.0 * PI).sqrt();
    errors[1] += sat.phi_max() * tail_abs;
    for e in errors {
        if e > tol {
            return Err(Error::Numerical {
                message: "moment quadrature did not reach tolerance".into(),
                estimate: Some(values[0]),
                error: Some(e),
            });
        }
    }
    Ok((values, errors))
}

pub fn lambda_quadrature(
    sat: &Saturator,
    f: &DMatrix<f64>,
    noise: &NoiseModel,
    horizon: usize,
    tol: f64,
) -> Result<MomentMatrices> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("quadrature tolerance must be positive".into()));
    }
    let (sd, stein) = projected_noise(f, noise)?;
    let n = sd.len();
    let mut block1 = DMatrix::zeros(n, n);
    let mut error1 = DMatrix::zeros(n, n);
    let mut cross = vec![[0.0; 2]; n];
    for j in 0..n {
        let (v, e) = gaussian_moments(sat, sd[j], tol)?;
        block1[(j, j)] = v[0];
        error1[(j, j)] = e[0];
        cross[j] = [v[1], e[1]];
    }
    let block2 = DMatrix::from_fn(n, n, |j, k| stein[(j, k)] * cross[j][0]);
    let error2 = DMatrix::from_fn(n, n, |j, k| stein[(j, k)].abs() * cross[j][1]);
    MomentMatrices::from_blocks(MomentMode::Quadrature, horizon, block1, block2, error1, error2)
}

/// Independent generator for noise coordinate `k` under `seed`.
pub fn coordinate_stream(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Sample means of `φ(Fw)φ(Fw)ᵀ` and `φ(Fw)wᵀ`; errors are standard errors.
/// Noise coordinate `k` is drawn from stream `k` of `seed`.
pub fn lambda_monte_carlo(
    sat: &Saturator,
    f: &DMatrix<f64>,
    noise: &NoiseModel,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<MomentMatrices> {
    if samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "monte carlo moments need at least {MIN_MC_SAMPLES} samples, got {samples}"
        )));
    }
    let n = noise.dim();
    if f.shape() != (n, n) {
        return Err(Error::Dimension("F must be n x n to match the noise".into()));
    }
    let mut streams: Vec<ChaCha8Rng> = (0..n).map(|k| coordinate_stream(seed, k)).collect();
    let sd: Vec<f64> = (0..n).map(|k| noise.std_dev(k)).collect();
    let mut sum1 = DMatrix::<f64>::zeros(n, n);
    let mut sq1 = DMatrix::<f64>::zeros(n, n);
    let mut sum2 = DMatrix::<f64>::zeros(n, n);
    let mut sq2 = DMatrix::<f64>::zeros(n, n);
    let mut w = DVector::<f64>::zeros(n);
    for _ in 0..samples {
        for k in 0..n {
            let z: f64 = StandardNormal.sample(&mut streams[k]);
            w[k] = noise.mean()[k] + sd[k] * z;
        }
        let phi = sat.apply(&(f * &w));
        for j in 0..n {
            for l in 0..n {
                let a = phi[j] * phi[l];
                let b = phi[j] * w[l];
                sum1[(j, l)] += a;
                sq1[(j, l)] += a * a;
                sum2[(j, l)] += b;
                sq2[(j, l)] += b * b;
            }
        }
    }
    let count = samples as f64;
    let stderr = |sum: f64, sq: f64| {
        let mean = sum / count;
        let var = ((sq / count - mean * mean) * count / (count - 1.0)).max(0.0);
        (var / count).sqrt()
    };
    let block1 = sum1.map(|v| v / count);
    let block2 = sum2.map(|v| v / count);
    let error1 = DMatrix::from_fn(n, n, |j, l| stderr(sum1[(j, l)], sq1[(j, l)]));
    let error2 = DMatrix::from_fn(n, n, |j, l| stderr(sum2[(j, l)], sq2[(j, l)]));
    MomentMatrices::from_blocks(MomentMode::MonteCarlo, horizon, block1, block2, error1, error2)
}

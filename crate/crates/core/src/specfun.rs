//! Special functions used by the closed-form moment expressions.
//!
//! `erf`, `erfc` and `Γ` come from `libm`. The upper incomplete gamma function
//! and Tricomi's confluent hypergeometric function are computed here.

use crate::error::{Error, Result};
use crate::quad::{integrate, integrate_to_infinity, QuadSettings};

/// Error estimates above `MAX_REL_ERROR * max(1, |value|)` are reported as failures.
pub const MAX_REL_ERROR: f64 = 1e-10;

const SERIES_EPS: f64 = 1e-16;
const MAX_TERMS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecFunResult {
    pub value: f64,
    pub est_abs_error: f64,
}

impl SpecFunResult {
    fn checked(self, what: &str) -> Result<Self> {
        if !self.value.is_finite() {
            return Err(Error::Numerical {
                message: format!("{what} is not finite"),
                estimate: Some(self.value),
                error: Some(self.est_abs_error),
            });
        }
        if self.est_abs_error > MAX_REL_ERROR * self.value.abs().max(1.0) {
            return Err(Error::Numerical {
                message: format!("{what} did not reach the required accuracy"),
                estimate: Some(self.value),
                error: Some(self.est_abs_error),
            });
        }
        Ok(self)
    }
}

fn finite(name: &str, z: f64) -> Result<()> {
    if z.is_nan() {
        Err(Error::InvalidInput(format!("{name}: argument is NaN")))
    } else {
        Ok(())
    }
}

/// Standard error function, `(2/√π) ∫_0^z e^{-t²} dt`.
pub fn erf(z: f64) -> Result<f64> {
    finite("erf", z)?;
    Ok(libm::erf(z))
}

pub fn erfc(z: f64) -> Result<f64> {
    finite("erfc", z)?;
    Ok(libm::erfc(z))
}

pub fn gamma(a: f64) -> f64 {
    libm::tgamma(a)
}

/// Lower incomplete gamma by its power series; use for `x < a + 1`.
fn lower_gamma_series(a: f64, x: f64) -> Result<f64> {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..MAX_TERMS {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * SERIES_EPS {
            return Ok(sum * (-x + a * x.ln()).exp());
        }
    }
    Err(Error::numerical("incomplete gamma series did not converge"))
}

/// `Γ(a, x)` by the Legendre continued fraction (modified Lentz).
fn upper_gamma_fraction(a: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_TERMS {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < SERIES_EPS {
            return Ok((-x + a * x.ln()).exp() * h);
        }
    }
    Err(Error::numerical("incomplete gamma continued fraction did not converge"))
}

/// `∫_x^{x0} t^{a-1} e^{-t} dt` by termwise integration of the exponential series.
fn gamma_segment(a: f64, x: f64, x0: f64) -> Result<f64> {
    // k = 0 term written as x^a (e^{a ln(x0/x)} - 1) / a for small a.
    let mut sum = x.powf(a) * (a * (x0 / x).ln()).exp_m1() / a;
    let mut fact = 1.0;
    for k in 1..200 {
        fact *= -(k as f64);
        let p = a + k as f64;
        let term = (x0.powf(p) - x.powf(p)) / (p * fact);
        sum += term;
        if term.abs() < sum.abs() * SERIES_EPS {
            return Ok(sum);
        }
    }
    Err(Error::numerical("incomplete gamma segment series did not converge"))
}

/// Upper incomplete gamma function `Γ(a, z) = ∫_z^∞ t^{a-1} e^{-t} dt` for `a, z > 0`.
pub fn upper_incomplete_gamma(a: f64, z: f64) -> Result<SpecFunResult> {
    finite("upper_incomplete_gamma", a)?;
    finite("upper_incomplete_gamma", z)?;
    if a <= 0.0 || z <= 0.0 || a.is_infinite() {
        return Err(Error::InvalidInput(format!(
            "upper_incomplete_gamma requires a > 0 and z > 0, got a={a}, z={z}"
        )));
    }
    if z.is_infinite() {
        return Ok(SpecFunResult {
            value: 0.0,
            est_abs_error: 0.0,
        });
    }
    const SPLIT: f64 = 0.5;
    let value = if z >= a + 1.0 || (a < 1.0 && z >= SPLIT) {
        upper_gamma_fraction(a, z)?
    } else if a >= 1.0 {
        gamma(a) - lower_gamma_series(a, z)?
    } else {
        upper_gamma_fraction(a, SPLIT)? + gamma_segment(a, z, SPLIT)?
    };
    SpecFunResult {
        value,
        est_abs_error: 1e-14 * value.abs(),
    }
    .checked("upper incomplete gamma")
}

/// Tricomi's confluent hypergeometric function
/// `U(a, b, z) = (1/Γ(a)) ∫_0^∞ e^{-zt} t^{a-1} (1+t)^{b-a-1} dt` for `a, z > 0`.
///
/// On `[0, 1]` the substitution `t = s^{1/a}` removes the `t^{a-1}` endpoint
/// singularity; the tail is mapped onto `[0, 1)`.
pub fn tricomi_u(a: f64, b: f64, z: f64) -> Result<SpecFunResult> {
    finite("tricomi_u", a)?;
    finite("tricomi_u", b)?;
    finite("tricomi_u", z)?;
    if a <= 0.0 || z <= 0.0 || !(a.is_finite() && b.is_finite() && z.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "tricomi_u requires a > 0 and z > 0, got a={a}, b={b}, z={z}"
        )));
    }
    let settings = QuadSettings {
        abs_tol: 0.0,
        rel_tol: 1e-13,
        max_intervals: 4000,
    };
    let c = b - a - 1.0;
    let inv_a = 1.0 / a;
    let head = integrate(
        |s: f64| {
            let t = s.powf(inv_a);
            inv_a * (-z * t).exp() * (1.0 + t).powf(c)
        },
        0.0,
        1.0,
        settings,
    )?;
    let tail = integrate_to_infinity(
        |t: f64| (-z * t).exp() * t.powf(a - 1.0) * (1.0 + t).powf(c),
        1.0,
        settings,
    )?;
    let g = gamma(a);
    SpecFunResult {
        value: (head.value + tail.value) / g,
        est_abs_error: (head.abs_error + tail.abs_error) / g,
    }
    .checked("tricomi U")
}

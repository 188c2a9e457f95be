//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use satmpc::batch::build_batch;
use satmpc::model::{CostSpec, InputConstraint, NoiseModel, SystemModel};
use satmpc::moments::{MomentMatrices, MomentMode};
use satmpc::qp::{assemble, QpProblem};

/// Composite Simpson rule with `2k` panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, k: usize) -> f64 {
    let n = 2 * k;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    s * h / 3.0
}

/// `Γ(a, z)` by Simpson on `[z, z + 60 + a]` after `t = z + s²` for a smooth integrand.
pub fn upper_gamma_oracle(a: f64, z: f64) -> f64 {
    let upper = (60.0 + 2.0 * a).sqrt();
    simpson(|s| 2.0 * s * (z + s * s).powf(a - 1.0) * (-(z + s * s)).exp(), 0.0, upper, 200_000)
}

/// `Γ(a) U(a, b, z) = ∫_0^∞ e^{-zt} t^{a-1}(1+t)^{b-a-1} dt` with `t = s²` and a finite cutoff.
/// Needs `a >= 1/2`.
pub fn tricomi_oracle(a: f64, b: f64, z: f64) -> f64 {
    let cutoff = (60.0 / z).sqrt();
    let v = simpson(
        |s| {
            let t = s * s;
            2.0 * s.powf(2.0 * a - 1.0) * (-z * t).exp() * (1.0 + t).powf(b - a - 1.0)
        },
        0.0,
        cutoff,
        400_000,
    );
    v / libm::tgamma(a)
}

/// Euclidean projection of `v` onto `{x : Σ w_j |x_j| ≤ radius}` by bisection on the shift.
pub fn project_weighted_l1(v: &[f64], w: &[f64], radius: f64) -> Vec<f64> {
    let load = |tau: f64| -> f64 {
        v.iter()
            .zip(w)
            .map(|(&x, &wj)| wj * (x.abs() - tau * wj).max(0.0))
            .sum()
    };
    if load(0.0) <= radius {
        return v.to_vec();
    }
    let mut lo = 0.0;
    let mut hi = v.iter().zip(w).map(|(x, wj)| x.abs() / wj).fold(0.0, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if load(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = hi;
    v.iter()
        .zip(w)
        .map(|(&x, &wj)| x.signum() * (x.abs() - tau * wj).max(0.0))
        .collect()
}

pub fn qp_objective(qp: &QpProblem, g: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    qp.b.dot(d) + d.dot(&(&qp.m1 * d)) + (g.transpose() * &qp.m1 * g * &qp.lambda1).trace() + (&qp.m2 * g * &qp.lambda2).trace()
}

/// Accelerated projected gradient on `(Ḡ, d̄)` directly, with the row
/// constraints projected exactly. Returns the best objective and its argument.
pub fn projected_gradient_oracle(qp: &QpProblem, iterations: usize) -> (f64, DMatrix<f64>, DVector<f64>) {
    let rows = qp.b.len();
    let cols = qp.lambda1.nrows();
    let mask = DMatrix::from_fn(rows, cols, |i, j| if qp.mask[(i, j)] { 1.0 } else { 0.0 });
    let l1 = 0.5 * (&qp.lambda1 + qp.lambda1.transpose());
    let m1_max = qp.m1.clone().symmetric_eigen().eigenvalues.max();
    let l1_max = l1.clone().symmetric_eigen().eigenvalues.max().max(0.0);
    let lip = 2.0 * m1_max * l1_max.max(1.0);
    let step = 1.0 / lip;
    let grad = |g: &DMatrix<f64>, d: &DVector<f64>| {
        let gg = (2.0 * &qp.m1 * g * &l1 + (&qp.lambda2 * &qp.m2).transpose()).component_mul(&mask);
        let gd = &qp.b + 2.0 * &qp.m1 * d;
        (gg, gd)
    };
    let project = |g: &DMatrix<f64>, d: &DVector<f64>| {
        let mut gp = g.component_mul(&mask);
        let mut dp = d.clone();
        for i in 0..rows {
            let free: Vec<usize> = (0..cols).filter(|&j| qp.mask[(i, j)]).collect();
            let mut v = vec![d[i]];
            let mut w = vec![1.0];
            for &j in &free {
                v.push(g[(i, j)]);
                w.push(qp.phi_max);
            }
            let p = project_weighted_l1(&v, &w, qp.u_max);
            dp[i] = p[0];
            for (k, &j) in free.iter().enumerate() {
                gp[(i, j)] = p[k + 1];
            }
        }
        (gp, dp)
    };
    let mut g = DMatrix::zeros(rows, cols);
    let mut d = DVector::zeros(rows);
    let (mut yg, mut yd) = (g.clone(), d.clone());
    let mut t = 1.0_f64;
    let mut best = (qp_objective(qp, &g, &d), g.clone(), d.clone());
    for _ in 0..iterations {
        let (gg, gd) = grad(&yg, &yd);
        let (ng, nd) = project(&(&yg - step * gg), &(&yd - step * gd));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        yg = &ng + beta * (&ng - &g);
        yd = &nd + beta * (&nd - &d);
        g = ng;
        d = nd;
        t = t_next;
        let f = qp_objective(qp, &g, &d);
        if f < best.0 {
            best = (f, g.clone(), d.clone());
        }
    }
    best
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, 1.0);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Random Schur-stable model with `F = I`.
pub fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize) -> SystemModel {
    loop {
        let a = random_matrix(rng, n, n, 1.0);
        let rho = satmpc::model::spectral_radius(&a);
        let a = a * (rng.gen_range(0.3..0.95) / rho.max(1e-3));
        let b = random_matrix(rng, n, m, 1.5);
        let r = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        if let Ok(model) = SystemModel::new(a, b, DMatrix::identity(n, n), r) {
            if model.is_schur() {
                return model;
            }
        }
    }
}

/// A random small policy program with PSD moment blocks.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=2);
    let m = 1;
    let horizon = rng.gen_range(1..=3);
    let model = random_model(&mut rng, n, m);
    let q: Vec<DMatrix<f64>> = (0..=horizon).map(|_| random_spd(&mut rng, n)).collect();
    let r: Vec<DMatrix<f64>> = (0..horizon).map(|_| random_spd(&mut rng, m)).collect();
    let cost = CostSpec::new(q, r).unwrap();
    let batch = build_batch(&model, &cost).unwrap();
    let noise = NoiseModel::zero_mean(DVector::from_fn(n, |_, _| rng.gen_range(0.1..4.0))).unwrap();
    let block1 = random_spd(&mut rng, n) * 0.3;
    let block2 = random_matrix(&mut rng, n, n, 1.0);
    let lam = MomentMatrices::from_blocks(
        MomentMode::Quadrature,
        horizon,
        block1,
        block2,
        DMatrix::zeros(n, n),
        DMatrix::zeros(n, n),
    )
    .unwrap();
    let u_max = rng.gen_range(0.5..3.0);
    let phi_max = rng.gen_range(0.2..1.0) * u_max;
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-8.0..8.0));
    assemble(&batch, &x0, &noise, &lam, &InputConstraint::new(u_max, phi_max).unwrap()).unwrap()
}

/// `Σ_{k=0}^{K} (Mᵀ)^k M^k`.
pub fn lyapunov_series(m: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut p = DMatrix::zeros(n, n);
    let mut pow = DMatrix::identity(n, n);
    for _ in 0..=terms {
        p += pow.transpose() * &pow;
        pow = m * pow;
    }
    p
}

/// Largest `|λ|` by power iteration on `MᵀM` powers (upper bound on the spectral radius estimate).
pub fn power_iteration_norm(m: &DMatrix<f64>, iters: usize) -> f64 {
    let mut v = DVector::from_element(m.ncols(), 1.0);
    let mut est = 0.0;
    for _ in 0..iters {
        let w = m * &v;
        est = w.norm() / v.norm();
        v = w / est.max(1e-300);
    }
    est
}

pub fn paper_model() -> (SystemModel, NoiseModel, InputConstraint) {
    let a = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.01, 0.3, 0.3, 0.06, 0.09, 0.02, 0.5]);
    let b = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 0.5]);
    let model = SystemModel::new(a, b, DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
    let noise = NoiseModel::zero_mean(DVector::from_element(3, 4.0)).unwrap();
    (model, noise, InputConstraint::new(10.0, 5.0).unwrap())
}

//! The convex program for `(Ḡ, d̄)`:
//!
//! ```text
//! min  bᵀd̄ + d̄ᵀM₁d̄ + tr(ḠᵀM₁ḠΛ₁ + M₂ḠΛ₂)
//! s.t. |d̄_i| + ‖Ḡ_i‖₁ φ_max ≤ U_max   for every row i
//! ```
//!
//! It is rewritten with auxiliary `T ≥ |Ḡ|` into a standard inequality QP and
//! solved with a Mehrotra predictor–corrector interior point method.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::batch::BatchMatrices;
use crate::error::{Error, Result};
use crate::model::{InputConstraint, NoiseModel};
use crate::moments::MomentMatrices;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub b: DVector<f64>,
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    pub c: f64,
    pub lambda1: DMatrix<f64>,
    pub lambda2: DMatrix<f64>,
    pub u_max: f64,
    pub phi_max: f64,
    /// `Nm x Nn`; `true` where an entry of `Ḡ` is free (strictly lower block triangle).
    pub mask: DMatrix<bool>,
    // Parts of b and c that do not depend on x0.
    qb: DMatrix<f64>,
    affine_noise_term: DVector<f64>,
    noise_trace: f64,
}

/// Strictly lower block-triangular pattern of `Ḡ`.
pub fn structure_mask(n: usize, m: usize, horizon: usize) -> DMatrix<bool> {
    DMatrix::from_fn(horizon * m, horizon * n, |i, j| j / n < i / m)
}

pub fn assemble(
    batch: &BatchMatrices,
    x0: &DVector<f64>,
    noise: &NoiseModel,
    lambda: &MomentMatrices,
    constraint: &InputConstraint,
) -> Result<QpProblem> {
    let (n, m, horizon) = (batch.n, batch.m, batch.horizon);
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
    }
    if noise.dim() != n {
        return Err(Error::Dimension("noise dimension does not match the model".into()));
    }
    if lambda.lambda1.shape() != (horizon * n, horizon * n) || lambda.lambda2.shape() != (horizon * n, horizon * n) {
        return Err(Error::Dimension(format!(
            "moment matrices must be {0}x{0}",
            horizon * n
        )));
    }
    // E[φ(F̄w̄)] = 0 holds for odd saturators only under zero-mean noise.
    if !noise.is_zero_mean() {
        return Err(Error::InvalidInput(
            "the policy program assumes E[φ(Fw)] = 0; normalize the noise to zero mean first".into(),
        ));
    }

    let qb = &batch.q_bar * &batch.b_bar;
    let m1 = &batch.r_weight_bar + batch.b_bar.transpose() * &qb;
    let m1 = 0.5 * (&m1 + m1.transpose());
    let dfb = &batch.d_bar * &batch.f_bar;
    let m2 = 2.0 * dfb.transpose() * &qb;
    let mu = noise.stacked_mean(horizon);
    let affine_noise_term = &dfb * &mu + &batch.d_bar * &batch.r_bar;
    let sigma = noise.stacked_covariance(horizon);
    let noise_trace = (dfb.transpose() * &batch.q_bar * &dfb * sigma).trace();

    let mut qp = QpProblem {
        n,
        m,
        horizon,
        b: DVector::zeros(horizon * m),
        m1,
        m2,
        c: 0.0,
        lambda1: lambda.lambda1.clone(),
        lambda2: lambda.lambda2.clone(),
        u_max: constraint.u_max(),
        phi_max: constraint.phi_max(),
        mask: structure_mask(n, m, horizon),
        qb,
        affine_noise_term,
        noise_trace,
    };
    qp.set_initial_state(batch, x0)?;
    Ok(qp)
}

impl QpProblem {
    /// Recomputes `b` and `c` for a new initial state; everything else is reused.
    pub fn set_initial_state(&mut self, batch: &BatchMatrices, x0: &DVector<f64>) -> Result<()> {
        if x0.len() != self.n {
            return Err(Error::Dimension(format!("x0 has length {}, expected {}", x0.len(), self.n)));
        }
        // Deterministic part of x̄: Ā x0 + D̄ r̄ (plus D̄ F̄ μ inside b).
        let drift = &batch.a_bar * x0 + &batch.d_bar * &batch.r_bar;
        let shifted = &batch.a_bar * x0 + &self.affine_noise_term;
        self.b = 2.0 * self.qb.transpose() * shifted;
        let dfb_mu = &self.affine_noise_term - &batch.d_bar * &batch.r_bar;
        self.c = drift.dot(&(&batch.q_bar * &drift))
            + self.noise_trace
            + 2.0 * drift.dot(&(&batch.q_bar * dfb_mu));
        Ok(())
    }

    /// `bᵀd̄ + d̄ᵀM₁d̄ + tr(ḠᵀM₁ḠΛ₁ + M₂ḠΛ₂)`, the objective without the constant.
    pub fn objective(&self, g_bar: &DMatrix<f64>, d_bar: &DVector<f64>) -> f64 {
        let quad = (g_bar.transpose() * &self.m1 * g_bar * &self.lambda1).trace();
        let lin = (&self.m2 * g_bar * &self.lambda2).trace();
        self.b.dot(d_bar) + d_bar.dot(&(&self.m1 * d_bar)) + quad + lin
    }

    /// `min_i (U_max − |d̄_i| − ‖Ḡ_i‖₁ φ_max)`.
    pub fn feasibility_margin(&self, g_bar: &DMatrix<f64>, d_bar: &DVector<f64>) -> f64 {
        (0..d_bar.len())
            .map(|i| {
                let row_l1: f64 = g_bar.row(i).iter().map(|v| v.abs()).sum();
                self.u_max - d_bar[i].abs() - row_l1 * self.phi_max
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Full expected cost `E[x̄ᵀQ̄x̄ + ūᵀR̄ū]` of a policy.
pub fn evaluate_expected_cost(policy: &PolicyParameters, qp: &QpProblem) -> f64 {
    qp.objective(&policy.g_bar, &policy.d_bar) + qp.c
}

/// Sparse row of the inequality matrix.
#[derive(Debug, Clone)]
struct Row {
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Row {
    fn dot(&self, z: &DVector<f64>) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v * z[i]).sum()
    }
}

/// `min ½zᵀHz + hᵀz  s.t.  Ez ≤ e` with `z = (free Ḡ entries, d̄, T)`.
#[derive(Debug, Clone)]
pub struct StandardQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    rows: Vec<Row>,
    pub rhs: DVector<f64>,
    /// `(row, col)` of `Ḡ` for each free entry, in decision-vector order.
    pub g_entries: Vec<(usize, usize)>,
    pub d_offset: usize,
    pub t_offset: usize,
}

impl StandardQp {
    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }
    pub fn num_constraints(&self) -> usize {
        self.rows.len()
    }

    /// `Ez` as a dense vector.
    pub fn constraint_values(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.dot(z)))
    }

    fn add_transpose(&self, out: &mut DVector<f64>, y: &DVector<f64>) {
        for (row, &yi) in self.rows.iter().zip(y.iter()) {
            for (&i, &v) in row.idx.iter().zip(&row.val) {
                out[i] += v * yi;
            }
        }
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// Decision vector for a given `(Ḡ, d̄)` with `T = |Ḡ|`.
    pub fn pack(&self, g_bar: &DMatrix<f64>, d_bar: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        for (k, &(i, j)) in self.g_entries.iter().enumerate() {
            z[k] = g_bar[(i, j)];
            z[self.t_offset + k] = g_bar[(i, j)].abs();
        }
        z.rows_mut(self.d_offset, d_bar.len()).copy_from(d_bar);
        z
    }

    pub fn unpack(&self, z: &DVector<f64>, rows: usize, cols: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut g = DMatrix::zeros(rows, cols);
        for (k, &(i, j)) in self.g_entries.iter().enumerate() {
            g[(i, j)] = z[k];
        }
        (g, z.rows(self.d_offset, rows).into_owned())
    }

    /// Replaces the linear term of `d̄` (the vector `b`).
    pub fn set_d_linear(&mut self, b: &DVector<f64>) {
        self.linear.rows_mut(self.d_offset, b.len()).copy_from(b);
    }
}

pub fn reformulate_epigraph(qp: &QpProblem) -> StandardQp {
    let rows_g = qp.horizon * qp.m;
    let cols_g = qp.horizon * qp.n;
    let g_entries: Vec<(usize, usize)> = (0..rows_g)
        .flat_map(|i| (0..cols_g).map(move |j| (i, j)))
        .filter(|&(i, j)| qp.mask[(i, j)])
        .collect();
    let ng = g_entries.len();
    let d_offset = ng;
    let t_offset = ng + rows_g;
    let dim = t_offset + ng;

    let mut hessian = DMatrix::zeros(dim, dim);
    for (a, &(i, j)) in g_entries.iter().enumerate() {
        for (b, &(k, l)) in g_entries.iter().enumerate() {
            let lam = 0.5 * (qp.lambda1[(j, l)] + qp.lambda1[(l, j)]);
            hessian[(a, b)] = 2.0 * qp.m1[(i, k)] * lam;
        }
    }
    hessian
        .view_mut((d_offset, d_offset), (rows_g, rows_g))
        .copy_from(&(2.0 * &qp.m1));

    let l2m2 = &qp.lambda2 * &qp.m2;
    let mut linear = DVector::zeros(dim);
    for (a, &(i, j)) in g_entries.iter().enumerate() {
        linear[a] = l2m2[(j, i)];
    }
    linear.rows_mut(d_offset, rows_g).copy_from(&qp.b);

    let mut rows = Vec::with_capacity(2 * ng + 2 * rows_g);
    let mut rhs = Vec::with_capacity(2 * ng + 2 * rows_g);
    for k in 0..ng {
        rows.push(Row {
            idx: vec![k, t_offset + k],
            val: vec![1.0, -1.0],
        });
        rhs.push(0.0);
        rows.push(Row {
            idx: vec![k, t_offset + k],
            val: vec![-1.0, -1.0],
        });
        rhs.push(0.0);
    }
    for i in 0..rows_g {
        let t_idx: Vec<usize> = g_entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.0 == i)
            .map(|(k, _)| t_offset + k)
            .collect();
        for sign in [1.0, -1.0] {
            let mut idx = vec![d_offset + i];
            let mut val = vec![sign];
            idx.extend(&t_idx);
            val.extend(std::iter::repeat_n(qp.phi_max, t_idx.len()));
            rows.push(Row { idx, val });
            rhs.push(qp.u_max);
        }
    }

    StandardQp {
        hessian,
        linear,
        rows,
        rhs: DVector::from_vec(rhs),
        g_entries,
        d_offset,
        t_offset,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iter: 200,
            eps_abs: 1e-9,
            eps_rel: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

fn kkt_residuals(qp: &StandardQp, z: &DVector<f64>, lam: &DVector<f64>) -> KktResiduals {
    let ez = qp.constraint_values(z);
    let slack = &qp.rhs - &ez;
    let mut grad = &qp.hessian * z + &qp.linear;
    qp.add_transpose(&mut grad, lam);
    KktResiduals {
        primal: slack.iter().map(|&s| (-s).max(0.0)).fold(0.0, f64::max),
        dual: grad.amax(),
        complementarity: slack
            .iter()
            .zip(lam.iter())
            .map(|(&s, &l)| (s * l).abs())
            .fold(0.0, f64::max),
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(1.0, f64::min)
}

/// Primal–dual interior point solve of a [`StandardQp`].
pub fn solve_standard(qp: &StandardQp, settings: &SolverSettings) -> Result<QpSolution> {
    let dim = qp.dim();
    let p = qp.num_constraints();
    let mut z = DVector::<f64>::zeros(dim);
    let mut s = DVector::from_fn(p, |i, _| qp.rhs[i].max(0.0) + 1.0);
    let mut lam = DVector::<f64>::from_element(p, 1.0);
    let scale_e = qp.rhs.amax();
    let scale_h = qp.linear.amax();
    let mut best: Option<(f64, f64)> = None;

    for iter in 0..settings.max_iter {
        let ez = qp.constraint_values(&z);
        let r_p = &ez + &s - &qp.rhs;
        let hz = &qp.hessian * &z;
        let mut r_d = &hz + &qp.linear;
        qp.add_transpose(&mut r_d, &lam);
        let mu = s.dot(&lam) / p as f64;

        let primal_ok = r_p.amax() <= settings.eps_abs + settings.eps_rel * scale_e;
        let dual_ok = r_d.amax() <= settings.eps_abs + settings.eps_rel * scale_h.max(hz.amax());
        let residuals = kkt_residuals(qp, &z, &lam);
        let res = residuals.max();
        if best.is_none_or(|(r, _)| res < r) {
            best = Some((res, qp.value(&z)));
        }
        if primal_ok && dual_ok && mu <= settings.eps_abs && residuals.complementarity <= settings.eps_abs.max(1e-12) {
            return Ok(QpSolution {
                z,
                multipliers: lam,
                iterations: iter,
                residuals,
            });
        }

        let w = DVector::from_fn(p, |i, _| lam[i] / s[i]);
        let mut k = qp.hessian.clone();
        for (row, &wi) in qp.rows.iter().zip(w.iter()) {
            for (a, (&i, &vi)) in row.idx.iter().zip(&row.val).enumerate() {
                for (&j, &vj) in row.idx[a..].iter().zip(&row.val[a..]) {
                    let add = wi * vi * vj;
                    k[(i, j)] += add;
                    if i != j {
                        k[(j, i)] += add;
                    }
                }
            }
        }
        let chol = match k.clone().cholesky() {
            Some(c) => c,
            None => {
                let reg = 1e-12 * (1.0 + k.diagonal().amax());
                for i in 0..dim {
                    k[(i, i)] += reg;
                }
                k.cholesky().ok_or_else(|| Error::numerical("interior point KKT system is singular"))?
            }
        };

        let direction = |r_c: &DVector<f64>| {
            // (H + EᵀWE) Δz = −r_d − Eᵀ(W r_p − S⁻¹ r_c)
            let y = DVector::from_fn(p, |i, _| w[i] * r_p[i] - r_c[i] / s[i]);
            let mut rhs = -&r_d;
            let mut ety = DVector::zeros(dim);
            qp.add_transpose(&mut ety, &y);
            rhs -= ety;
            let dz = chol.solve(&rhs);
            let edz = qp.constraint_values(&dz);
            let dlam = DVector::from_fn(p, |i, _| w[i] * (edz[i] + r_p[i]) - r_c[i] / s[i]);
            let ds = -&r_p - edz;
            (dz, dlam, ds)
        };

        let r_aff = s.component_mul(&lam);
        let (_, dlam_a, ds_a) = direction(&r_aff);
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&lam, &dlam_a));
        let mu_aff = (&s + alpha_aff * &ds_a).dot(&(&lam + alpha_aff * &dlam_a)) / p as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);
        let r_c = DVector::from_fn(p, |i, _| s[i] * lam[i] + ds_a[i] * dlam_a[i] - sigma * mu);
        let (dz, dlam, ds) = direction(&r_c);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dlam))).min(1.0);
        z += alpha * dz;
        s += alpha * ds;
        lam += alpha * dlam;
    }
    let (residual, best_objective) = best.unwrap_or((f64::INFINITY, f64::NAN));
    Err(Error::SolverFailed {
        iterations: settings.max_iter,
        residual,
        best_objective,
    })
}

#[derive(Debug, Clone)]
pub struct PolicyParameters {
    pub g_bar: DMatrix<f64>,
    pub d_bar: DVector<f64>,
    /// Objective without the constant `c`.
    pub objective: f64,
    pub kkt_residual: f64,
    pub residuals: KktResiduals,
    pub feasibility_margin: f64,
    pub iterations: usize,
}

impl PolicyParameters {
    /// Input over the horizon for a stacked vector of saturated noise.
    pub fn input(&self, phi_bar: &DVector<f64>) -> DVector<f64> {
        &self.g_bar * phi_bar + &self.d_bar
    }
}

/// Solves an already reformulated problem and maps the result back to `(Ḡ, d̄)`.
pub fn solve_reformulated(qp: &QpProblem, standard: &StandardQp, settings: &SolverSettings) -> Result<PolicyParameters> {
    let sol = solve_standard(standard, settings)?;
    let rows = qp.horizon * qp.m;
    let cols = qp.horizon * qp.n;
    let (mut g, mut d) = standard.unpack(&sol.z, rows, cols);
    // Interior point iterates can sit a hair outside the boundary; pull every
    // row back onto the feasible set so the input bound holds exactly.
    for i in 0..rows {
        let load = d[i].abs() + qp.phi_max * g.row(i).iter().map(|v| v.abs()).sum::<f64>();
        if load > qp.u_max {
            let f = qp.u_max / load;
            d[i] *= f;
            g.row_mut(i).scale_mut(f);
        }
    }
    Ok(PolicyParameters {
        objective: qp.objective(&g, &d),
        feasibility_margin: qp.feasibility_margin(&g, &d),
        kkt_residual: sol.residuals.max(),
        residuals: sol.residuals,
        iterations: sol.iterations,
        g_bar: g,
        d_bar: d,
    })
}

pub fn solve(qp: &QpProblem, settings: &SolverSettings) -> Result<PolicyParameters> {
    solve_reformulated(qp, &reformulate_epigraph(qp), settings)
}

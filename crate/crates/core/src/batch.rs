//! Stacked horizon matrices so that `x̄ = Ā x0 + B̄ ū + D̄ F̄ w̄ + D̄ r̄`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{CostSpec, SystemModel};

#[derive(Debug, Clone)]
pub struct BatchMatrices {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// `(N+1)n x n`, block row `l` is `A^l`.
    pub a_bar: DMatrix<f64>,
    /// `(N+1)n x Nm`, strictly lower block triangular.
    pub b_bar: DMatrix<f64>,
    /// `(N+1)n x Nn`, strictly lower block triangular.
    pub d_bar: DMatrix<f64>,
    /// `Nn x Nn`, block diagonal of `F`.
    pub f_bar: DMatrix<f64>,
    /// Stacked `r`, length `Nn`.
    pub r_bar: DVector<f64>,
    pub q_bar: DMatrix<f64>,
    pub r_weight_bar: DMatrix<f64>,
    /// `A^0 ..= A^N`.
    powers: Vec<DMatrix<f64>>,
}

/// One row block of the stacked dynamics, `x_l = A^l x0 + B̄_l ū + D̄_l F̄ w̄ + D̄_l r̄`.
#[derive(Debug, Clone)]
pub struct StepBlocks {
    pub a_pow: DMatrix<f64>,
    pub b_l: DMatrix<f64>,
    pub d_l: DMatrix<f64>,
}

pub fn build_batch(model: &SystemModel, cost: &CostSpec) -> Result<BatchMatrices> {
    let (n, m) = (model.n(), model.m());
    let horizon = cost.horizon();
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon N must be at least 1".into()));
    }
    if cost.state_dim() != n || cost.input_dim() != m {
        return Err(Error::Dimension("cost weights do not match the model".into()));
    }

    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    for l in 1..=horizon {
        let next = model.a() * &powers[l - 1];
        powers.push(next);
    }

    let rows = (horizon + 1) * n;
    let mut a_bar = DMatrix::zeros(rows, n);
    let mut b_bar = DMatrix::zeros(rows, horizon * m);
    let mut d_bar = DMatrix::zeros(rows, horizon * n);
    for l in 0..=horizon {
        a_bar.view_mut((l * n, 0), (n, n)).copy_from(&powers[l]);
        for j in 0..l {
            let p = &powers[l - 1 - j];
            d_bar.view_mut((l * n, j * n), (n, n)).copy_from(p);
            b_bar
                .view_mut((l * n, j * m), (n, m))
                .copy_from(&(p * model.b()));
        }
    }

    let mut f_bar = DMatrix::zeros(horizon * n, horizon * n);
    let mut r_bar = DVector::zeros(horizon * n);
    let mut r_weight_bar = DMatrix::zeros(horizon * m, horizon * m);
    let mut q_bar = DMatrix::zeros(rows, rows);
    for t in 0..horizon {
        f_bar.view_mut((t * n, t * n), (n, n)).copy_from(model.f());
        r_bar.rows_mut(t * n, n).copy_from(model.r());
        r_weight_bar
            .view_mut((t * m, t * m), (m, m))
            .copy_from(cost.r(t));
    }
    for t in 0..=horizon {
        q_bar.view_mut((t * n, t * n), (n, n)).copy_from(cost.q(t));
    }

    Ok(BatchMatrices {
        n,
        m,
        horizon,
        a_bar,
        b_bar,
        d_bar,
        f_bar,
        r_bar,
        q_bar,
        r_weight_bar,
        powers,
    })
}

impl BatchMatrices {
    pub fn a_power(&self, l: usize) -> &DMatrix<f64> {
        &self.powers[l]
    }

    /// State blocks of row `l` for `1 <= l <= N`.
    pub fn extract_step(&self, l: usize) -> Result<StepBlocks> {
        if l == 0 || l > self.horizon {
            return Err(Error::InvalidInput(format!(
                "step index {l} outside 1..={}",
                self.horizon
            )));
        }
        let n = self.n;
        Ok(StepBlocks {
            a_pow: self.powers[l].clone(),
            b_l: self.b_bar.rows(l * n, n).into_owned(),
            d_l: self.d_bar.rows(l * n, n).into_owned(),
        })
    }

    /// Stacked trajectory `x̄` for given initial state, inputs and noise.
    pub fn predict(&self, x0: &DVector<f64>, u_bar: &DVector<f64>, w_bar: &DVector<f64>) -> DVector<f64> {
        &self.a_bar * x0 + &self.b_bar * u_bar + &self.d_bar * (&self.f_bar * w_bar + &self.r_bar)
    }
}

//! Linear treatment-effect meta-regressor: OLS of known effects on level-1
//! features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RIDGE_FALLBACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeMetaRegressor {
    pub intercept: f64,
    pub weights: Vec<f64>,
    /// Set when the normal equations were singular and ridge was added.
    pub ridge_fallback: bool,
}

impl TeMetaRegressor {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + x.row(i).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut xa = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    xa.columns_mut(1, x.ncols()).copy_from(x);
    xa
}

/// Normal-equation OLS; falls back to a `1e-6` ridge (intercept unpenalized)
/// when `XᵀX` is numerically singular.
pub fn fit_te_regressor(x: &DMatrix<f64>, tau: &[f64]) -> Result<TeMetaRegressor> {
    if x.nrows() != tau.len() || tau.is_empty() {
        return Err(Error::data("effect targets and feature rows disagree"));
    }
    if tau.iter().any(|t| !t.is_finite()) {
        return Err(Error::data("non-finite effect target"));
    }
    let xa = with_intercept(x);
    let gram = xa.tr_mul(&xa);
    let rhs = xa.tr_mul(&DVector::from_column_slice(tau));
    let singular = {
        let sv = gram.clone().singular_values();
        let max = sv.max();
        !(sv.min() > max * 1e-12) || xa.nrows() < xa.ncols()
    };
    let (gram, ridge_fallback) = if singular {
        let mut g = gram;
        for j in 1..g.ncols() {
            g[(j, j)] += RIDGE_FALLBACK * x.nrows() as f64;
        }
        g[(0, 0)] += 1e-12;
        (g, true)
    } else {
        (gram, false)
    };
    let theta = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::numerical("effect regression system is not positive definite"))?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("effect regression produced non-finite weights"));
    }
    Ok(TeMetaRegressor {
        intercept: theta[0],
        weights: theta.rows(1, x.ncols()).iter().copied().collect(),
        ridge_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_regression() {
        let tau: Vec<f64> = (0..20).map(|i| (i as f64 - 10.0) / 7.0).collect();
        let x = DMatrix::from_column_slice(20, 1, &tau);
        let m = fit_te_regressor(&x, &tau).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-10 && m.intercept.abs() < 1e-10);
        assert!(!m.ridge_fallback);
    }

    #[test]
    fn duplicate_columns_trigger_ridge() {
        let tau: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let x = DMatrix::from_fn(10, 2, |i, _| i as f64);
        let m = fit_te_regressor(&x, &tau).unwrap();
        assert!(m.ridge_fallback);
        let pred = m.predict(&x);
        assert!(pred.iter().zip(&tau).all(|(p, t)| (p - t).abs() < 1e-3));
    }
}

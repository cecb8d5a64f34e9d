//! Weighted L2-regularized logistic regression, solved by damped Newton.
//! Level-1 designs have a handful of columns, so exact Hessians are cheap.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{log1p_exp, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub l2: f64,
    pub converged: bool,
}

impl LogisticModel {
    pub fn decision(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + x.row(i).iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.decision(x).into_iter().map(sigmoid).collect()
    }
}

/// `n / (2 n_c)` for each row's class.
pub fn balanced_weights(y: &[bool]) -> Vec<f64> {
    let n = y.len() as f64;
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let neg = n - pos;
    y.iter()
        .map(|&v| if v { n / (2.0 * pos) } else { n / (2.0 * neg) })
        .collect()
}

/// Weighted objective `Σ w_i ℓ_i / Σ w_i + (l2/2)‖β‖²`, intercept free.
pub fn objective(x: &DMatrix<f64>, y: &[bool], w: &[f64], l2: f64, b0: f64, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    let wsum: f64 = w.iter().sum();
    let loss: f64 = (0..x.nrows())
        .map(|i| {
            let e = eta[i] + b0;
            w[i] * (log1p_exp(e) - if y[i] { e } else { 0.0 })
        })
        .sum();
    loss / wsum + 0.5 * l2 * beta.norm_squared()
}

pub fn fit_logistic(x: &DMatrix<f64>, y: &[bool], weights: Option<&[f64]>, l2: f64) -> Result<LogisticModel> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::data("label and feature rows disagree"));
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::data("single-class training labels"));
    }
    if !(l2 >= 0.0) {
        return Err(Error::config(format!("negative L2 penalty {l2}")));
    }
    let ones = vec![1.0; n];
    let w = weights.unwrap_or(&ones);
    let wsum: f64 = w.iter().sum();
    // Augmented design with the intercept in column 0.
    let mut xa = DMatrix::from_element(n, p + 1, 1.0);
    xa.columns_mut(1, p).copy_from(x);
    let mut theta = DVector::zeros(p + 1);
    let pos_w: f64 = (0..n).filter(|&i| y[i]).map(|i| w[i]).sum();
    theta[0] = (pos_w / (wsum - pos_w)).ln();
    let obj = |t: &DVector<f64>| objective(x, y, w, l2, t[0], &t.rows(1, p).into_owned());
    let mut current = obj(&theta);
    let mut converged = false;
    // A tiny ridge on the intercept keeps the Newton system solvable on
    // separable data with l2 = 0.
    let jitter = 1e-10;
    for _ in 0..200 {
        let eta = &xa * &theta;
        let mut grad = DVector::zeros(p + 1);
        let mut hess = DMatrix::zeros(p + 1, p + 1);
        for i in 0..n {
            let pr = sigmoid(eta[i]);
            let r = w[i] * (pr - if y[i] { 1.0 } else { 0.0 }) / wsum;
            let h = w[i] * pr * (1.0 - pr) / wsum;
            let row = xa.row(i).transpose();
            grad.axpy(r, &row, 1.0);
            hess.ger(h, &row, &row, 1.0);
        }
        for j in 1..=p {
            grad[j] += l2 * theta[j];
            hess[(j, j)] += l2;
        }
        for j in 0..=p {
            hess[(j, j)] += jitter;
        }
        if grad.amax() < 1e-10 {
            converged = true;
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => grad.clone(),
        };
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-12 {
            let cand = &theta - &step * t;
            let val = obj(&cand);
            if val <= current - 1e-4 * t * slope {
                theta = cand;
                current = val;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            converged = grad.amax() < 1e-6;
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("logistic meta-learner diverged"));
    }
    Ok(LogisticModel {
        intercept: theta[0],
        coef: theta.rows(1, p).iter().copied().collect(),
        l2,
        converged,
    })
}

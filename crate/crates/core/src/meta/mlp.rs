//! One-hidden-layer perceptron (tanh hidden units, logistic output) trained
//! full-batch with Adam and early stopping on a stratified validation slice.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::stratified_split;
use crate::error::{Error, Result};
use crate::util::{self, derive_seed, log1p_exp, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub balanced: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 16,
            learning_rate: 0.01,
            l2: 1e-4,
            max_epochs: 1000,
            patience: 50,
            validation_fraction: 0.2,
            balanced: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `hidden × p`.
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DVector<f64>,
    pub b2: f64,
    pub epochs: usize,
}

impl Mlp {
    fn hidden(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        // n × hidden
        let mut h = x * self.w1.transpose();
        for mut row in h.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + self.b1[j]).tanh();
            }
        }
        h
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let h = self.hidden(x);
        (&h * &self.w2).iter().map(|v| v + self.b2).collect()
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.logits(x).into_iter().map(sigmoid).collect()
    }
}

fn weighted_loss(logits: &[f64], y: &[bool], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    logits
        .iter()
        .zip(y.iter().zip(w))
        .map(|(&e, (&yi, &wi))| wi * (log1p_exp(e) - if yi { e } else { 0.0 }))
        .sum::<f64>()
        / total
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        for k in 0..params.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * grad[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * grad[k] * grad[k];
            let mh = self.m[k] / (1.0 - b1.powi(self.t));
            let vh = self.v[k] / (1.0 - b2.powi(self.t));
            params[k] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

fn pack(m: &Mlp) -> Vec<f64> {
    let mut out: Vec<f64> = m.w1.iter().copied().collect();
    out.extend(m.b1.iter());
    out.extend(m.w2.iter());
    out.push(m.b2);
    out
}

fn unpack(params: &[f64], h: usize, p: usize, epochs: usize) -> Mlp {
    let w1 = DMatrix::from_column_slice(h, p, &params[..h * p]);
    let b1 = DVector::from_column_slice(&params[h * p..h * p + h]);
    let w2 = DVector::from_column_slice(&params[h * p + h..h * p + 2 * h]);
    Mlp {
        w1,
        b1,
        w2,
        b2: params[h * p + 2 * h],
        epochs,
    }
}

fn gradient(m: &Mlp, x: &DMatrix<f64>, y: &[bool], w: &[f64], l2: f64) -> Vec<f64> {
    let (n, p, h) = (x.nrows(), x.ncols(), m.b1.len());
    let total: f64 = w.iter().sum();
    let hid = m.hidden(x);
    let logits: Vec<f64> = (&hid * &m.w2).iter().map(|v| v + m.b2).collect();
    // dL/dlogit per row
    let r = DVector::from_fn(n, |i, _| w[i] * (sigmoid(logits[i]) - if y[i] { 1.0 } else { 0.0 }) / total);
    let g_w2 = hid.transpose() * &r + &m.w2 * l2;
    let g_b2 = r.sum();
    // back through tanh: n × h
    let mut delta = DMatrix::zeros(n, h);
    for i in 0..n {
        for j in 0..h {
            delta[(i, j)] = r[i] * m.w2[j] * (1.0 - hid[(i, j)] * hid[(i, j)]);
        }
    }
    let g_w1 = delta.transpose() * x + &m.w1 * l2;
    let g_b1: DVector<f64> = delta.row_sum().transpose();
    let mut out: Vec<f64> = g_w1.iter().copied().collect();
    debug_assert_eq!(out.len(), h * p);
    out.extend(g_b1.iter());
    out.extend(g_w2.iter());
    out.push(g_b2);
    out
}

pub fn fit_mlp(x: &DMatrix<f64>, y: &[bool], weights: &[f64], cfg: &MlpConfig, seed: u64) -> Result<Mlp> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n || weights.len() != n {
        return Err(Error::data("network inputs are misaligned"));
    }
    if cfg.hidden == 0 || cfg.max_epochs == 0 {
        return Err(Error::config("network needs hidden units and epochs"));
    }
    let (fit_rows, val_rows) = stratified_split(y, 1.0 - cfg.validation_fraction, derive_seed(seed, 0))?;
    let pick = |rows: &[usize]| {
        (
            x.select_rows(rows),
            rows.iter().map(|&i| y[i]).collect::<Vec<_>>(),
            rows.iter().map(|&i| weights[i]).collect::<Vec<_>>(),
        )
    };
    let (xf, yf, wf) = pick(&fit_rows);
    let (xv, yv, wv) = pick(&val_rows);

    let h = cfg.hidden;
    let mut rng = util::rng(derive_seed(seed, 1));
    let bound1 = (6.0 / (p + h) as f64).sqrt();
    let bound2 = (6.0 / (h + 1) as f64).sqrt();
    let mut model = Mlp {
        w1: DMatrix::from_fn(h, p, |_, _| rng.random_range(-bound1..bound1)),
        b1: DVector::zeros(h),
        w2: DVector::from_fn(h, |_, _| rng.random_range(-bound2..bound2)),
        b2: 0.0,
        epochs: 0,
    };
    let mut params = pack(&model);
    let mut adam = Adam {
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        t: 0,
    };
    let mut best = (weighted_loss(&model.logits(&xv), &yv, &wv), params.clone(), 0usize);
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let g = gradient(&model, &xf, &yf, &wf, cfg.l2);
        adam.step(&mut params, &g, cfg.learning_rate);
        model = unpack(&params, h, p, epoch);
        let val = weighted_loss(&model.logits(&xv), &yv, &wv);
        if !val.is_finite() {
            return Err(Error::numerical("network validation loss is not finite"));
        }
        if val < best.0 - 1e-7 {
            best = (val, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(unpack(&best.1, h, p, best.2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(m: &Mlp, x: &DMatrix<f64>, y: &[bool], w: &[f64], l2: f64) -> f64 {
        weighted_loss(&m.logits(x), y, w) + 0.5 * l2 * (m.w1.norm_squared() + m.w2.norm_squared())
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = DMatrix::from_fn(12, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 / 3.0 - 1.0);
        let y: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let w: Vec<f64> = (0..12).map(|i| 1.0 + (i % 2) as f64).collect();
        let mut rng = util::rng(2);
        let params: Vec<f64> = (0..(4 * 3 + 4 + 4 + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = unpack(&params, 4, 3, 0);
        let g = gradient(&m, &x, &y, &w, 0.01);
        for k in 0..params.len() {
            let (mut a, mut b) = (params.clone(), params.clone());
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (loss_of(&unpack(&a, 4, 3, 0), &x, &y, &w, 0.01) - loss_of(&unpack(&b, 4, 3, 0), &x, &y, &w, 0.01)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn fits_separable_problem() {
        let y: Vec<bool> = (0..100).map(|i| i % 4 == 0).collect();
        let x = DMatrix::from_fn(100, 2, |i, j| if j == 0 { y[i] as u8 as f64 } else { (i % 5) as f64 });
        let m = fit_mlp(&x, &y, &vec![1.0; 100], &MlpConfig::default(), 3).unwrap();
        let p = m.predict_proba(&x);
        assert!(p.iter().zip(&y).all(|(&pi, &yi)| (pi >= 0.5) == yi));
    }
}

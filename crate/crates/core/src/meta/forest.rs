//! Bagged CART classifiers with weighted Gini splits and random feature
//! subsets at every node.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features tried per split; `⌈√p⌉` when absent.
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub balanced: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 200,
            max_features: None,
            max_depth: None,
            min_samples_leaf: 1,
            balanced: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf { p: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { p } => return *p,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[(i, *feature)] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
}

impl Forest {
    /// Mean leaf probability over trees.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.trees.iter().map(|t| t.predict_row(x, i)).sum::<f64>() / self.trees.len() as f64)
            .collect()
    }
}

struct Builder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [bool],
    w: &'a [f64],
    mtry: usize,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

fn gini(pos: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let p = pos / total;
    2.0 * p * (1.0 - p)
}

impl Builder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let (pos, total) = rows.iter().fold((0.0, 0.0), |(p, t), &i| {
            (p + if self.y[i] { self.w[i] } else { 0.0 }, t + self.w[i])
        });
        self.nodes.push(Node::Leaf {
            p: if total > 0.0 { pos / total } else { 0.0 },
        });
        self.nodes.len() - 1
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize, rng: &mut util::Rng) -> usize {
        let first = self.y[rows[0]];
        let pure = rows.iter().all(|&i| self.y[i] == first);
        if pure || depth >= self.max_depth || rows.len() < 2 * self.min_leaf {
            return self.leaf(rows);
        }
        let p = self.x.ncols();
        let (total_pos, total_w) = rows.iter().fold((0.0, 0.0), |(a, b), &i| {
            (a + if self.y[i] { self.w[i] } else { 0.0 }, b + self.w[i])
        });
        let parent = gini(total_pos, total_w);
        let mut best: Option<(f64, usize, f64)> = None;
        for f in index::sample(rng, p, self.mtry.min(p)).into_iter() {
            rows.sort_by(|&a, &b| self.x[(a, f)].total_cmp(&self.x[(b, f)]));
            let (mut lp, mut lw) = (0.0, 0.0);
            for k in 0..rows.len() - 1 {
                let i = rows[k];
                lw += self.w[i];
                if self.y[i] {
                    lp += self.w[i];
                }
                let (xa, xb) = (self.x[(i, f)], self.x[(rows[k + 1], f)]);
                if xa == xb || k + 1 < self.min_leaf || rows.len() - k - 1 < self.min_leaf {
                    continue;
                }
                let rw = total_w - lw;
                let impurity = (lw * gini(lp, lw) + rw * gini(total_pos - lp, rw)) / total_w;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    best = Some((impurity, f, 0.5 * (xa + xb)));
                }
            }
        }
        let Some((impurity, feature, threshold)) = best else {
            return self.leaf(rows);
        };
        if impurity >= parent - 1e-15 {
            return self.leaf(rows);
        }
        let mut left: Vec<usize> = rows.iter().copied().filter(|&i| self.x[(i, feature)] <= threshold).collect();
        let mut right: Vec<usize> = rows.iter().copied().filter(|&i| self.x[(i, feature)] > threshold).collect();
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { p: 0.0 });
        let l = self.grow(&mut left, depth + 1, rng);
        let r = self.grow(&mut right, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left: l,
            right: r,
        };
        at
    }
}

pub fn fit_forest(x: &DMatrix<f64>, y: &[bool], weights: &[f64], cfg: &ForestConfig, seed: u64) -> Result<Forest> {
    let n = x.nrows();
    if n == 0 || y.len() != n || weights.len() != n {
        return Err(Error::data("forest inputs are empty or misaligned"));
    }
    if cfg.n_trees == 0 || cfg.min_samples_leaf == 0 {
        return Err(Error::config("forest needs at least one tree and leaves of size ≥ 1"));
    }
    let p = x.ncols();
    let mtry = cfg
        .max_features
        .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
        .clamp(1, p.max(1));
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = util::rng(derive_seed(seed, t as u64));
            let mut rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut b = Builder {
                x,
                y,
                w: weights,
                mtry,
                max_depth: cfg.max_depth.unwrap_or(usize::MAX),
                min_leaf: cfg.min_samples_leaf,
                nodes: Vec::new(),
            };
            b.grow(&mut rows, 0, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(Forest { trees, n_features: p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gini_values() {
        assert_eq!(gini(0.0, 4.0), 0.0);
        assert_eq!(gini(2.0, 4.0), 0.5);
    }

    #[test]
    fn learns_threshold() {
        let x = DMatrix::from_fn(200, 3, |i, j| if j == 1 { i as f64 } else { ((i * 31 + j) % 17) as f64 });
        let y: Vec<bool> = (0..200).map(|i| i >= 120).collect();
        let f = fit_forest(&x, &y, &vec![1.0; 200], &ForestConfig { n_trees: 50, ..Default::default() }, 1).unwrap();
        let p = f.predict_proba(&x);
        let correct = p.iter().zip(&y).filter(|(&pi, &yi)| (pi >= 0.5) == yi).count();
        assert!(correct >= 195, "{correct}");
    }

    #[test]
    fn deterministic_given_seed() {
        let x = DMatrix::from_fn(60, 2, |i, j| ((i * 7 + j * 5) % 13) as f64);
        let y: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let cfg = ForestConfig { n_trees: 20, ..Default::default() };
        let a = fit_forest(&x, &y, &vec![1.0; 60], &cfg, 5).unwrap();
        let b = fit_forest(&x, &y, &vec![1.0; 60], &cfg, 5).unwrap();
        assert_eq!(a, b);
    }
}

//! Positive-unlabeled learning on two Gaussian classes where only a fraction
//! `c` of the positives carry a label. Compares the Elkan-Noto estimate of
//! `c` with the truth and the unbiased PU risk fit with a naive classifier.
//!
//! cargo run --release --example pu_learning -- [c]

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use causal_stack::eval::precision_recall_f1;
use causal_stack::meta::logistic::fit_logistic;
use causal_stack::meta::pu::{fit_adapter_pu, fit_upu, AdapterPuConfig, UpuConfig};
use causal_stack::util::rng;

fn main() -> causal_stack::Result<()> {
    let c: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let (n, pi) = (2000, 0.3);
    let mut r = rng(17);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut x = DMatrix::zeros(n, 2);
    let (mut y, mut s) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let pos = r.random::<f64>() < pi;
        let shift = if pos { 3.0 } else { 0.0 };
        x[(i, 0)] = shift + noise.sample(&mut r);
        x[(i, 1)] = shift + noise.sample(&mut r);
        y.push(pos);
        s.push(pos && r.random::<f64>() < c);
    }

    let naive = fit_logistic(&x, &s, None, 1e-3)?;
    let naive_calls: Vec<bool> = naive.predict_proba(&x).iter().map(|&p| p >= 0.5).collect();

    let adapter = fit_adapter_pu(&x, &s, &AdapterPuConfig::default(), 3)?;
    let adapter_calls: Vec<bool> = adapter.predict_proba(&x).iter().map(|&p| p >= 0.5).collect();

    let prior = (s.iter().filter(|&&b| b).count() as f64 / n as f64) / adapter.calibration.c;
    let upu = fit_upu(&x, &s, prior.min(0.99), &UpuConfig::default())?;
    let upu_calls: Vec<bool> = upu.predict_proba(&x).iter().map(|&p| p >= 0.5).collect();

    println!("true c {c:.2}, estimated {:.3} ({})", adapter.calibration.c, adapter.calibration.estimation_fold);
    println!("true prior {pi:.2}, prior used by UPU {:.3}", upu.prior);
    for (name, calls) in [("naive LR", &naive_calls), ("Adapter-PU", &adapter_calls), ("UPU", &upu_calls)] {
        let prf = precision_recall_f1(calls, &y)?;
        println!("{name:<10} precision {:.3} recall {:.3} F1 {:.3}", prf.precision, prf.recall, prf.f1);
    }
    Ok(())
}

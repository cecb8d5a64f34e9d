//! Deconfounder learner on a confounded simulation: factor model, predictive
//! check, bootstrapped elastic-net outcome model.
//!
//! cargo run --release --example deconfounder -- [n_individuals] [n_snps]

use std::time::Instant;

use causal_stack::eval::precision_recall_f1;
use causal_stack::learners::deconfounder::{run_da_learner, DeconfounderConfig};
use causal_stack::sim::{simulate_dataset, SimConfig};

fn main() -> causal_stack::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let sim = SimConfig {
        n_individuals: args.first().copied().unwrap_or(1000),
        n_snps: args.get(1).copied().unwrap_or(2000),
        seed: 7,
        ..SimConfig::default()
    };
    let (ds, truth) = simulate_dataset(&sim)?;
    println!("simulated {} individuals x {} SNPs", ds.n_samples(), ds.n_variables());

    let t = Instant::now();
    let fit = run_da_learner(&ds, &DeconfounderConfig::default())?;
    println!(
        "PPCA k={} after {} EM iterations, predictive check p = {:.3} ({})",
        fit.ppca.k(),
        fit.ppca.n_iter(),
        fit.check.p_value,
        if fit.check.passed { "pass" } else { "fail" }
    );
    let prf = precision_recall_f1(&fit.output.causal_call, &truth.causal_mask)?;
    println!(
        "{} significant SNPs; precision {:.3} recall {:.3} F1 {:.3}",
        fit.output.causal_call.iter().filter(|&&c| c).count(),
        prf.precision,
        prf.recall,
        prf.f1
    );
    println!("lambda {:.4}, elapsed {:.1?}", fit.outcome.lambda, t.elapsed());
    Ok(())
}

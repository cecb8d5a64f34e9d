//! Draws a confounded GWAS dataset and writes it as CSV plus its ground truth.
//!
//! cargo run --release --example simulate -- [out_dir] [seed]

use std::path::PathBuf;

use causal_stack::data::write_level0_csv;
use causal_stack::sim::{simulate_dataset, SimConfig};

fn main() -> causal_stack::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "sim_out".into()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = SimConfig {
        n_individuals: 1000,
        n_snps: 500,
        seed,
        ..SimConfig::default()
    };
    let (ds, truth) = simulate_dataset(&cfg)?;

    std::fs::create_dir_all(&out)?;
    write_level0_csv(&ds, out.join("data.csv"), "y", None)?;
    std::fs::write(out.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;

    let cases = ds.y0().iter().sum::<f64>();
    let n_causal = truth.causal_mask.iter().filter(|&&c| c).count();
    let max_tau = truth.tau_true.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    println!("{} individuals, {} SNPs, {} causal", ds.n_samples(), ds.n_variables(), n_causal);
    println!("prevalence {:.3}, largest |tau| {:.4}", cases / ds.n_samples() as f64, max_tau);
    for (g, c) in truth.group_intercepts.iter().enumerate() {
        let size = truth.group_assignment.iter().filter(|&&a| a == g).count();
        println!("group {g}: {size} individuals, logit shift {c:+.3}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

//! Proxy-adjusted effect estimates: substitute confounders from PPCA feed an
//! outcome regressor, and each SNP's effect is the contrast of two
//! interventions on it.
//!
//! cargo run --release --example cate

use causal_stack::eval::{pehe, precision_recall_f1, roc_auc};
use causal_stack::learners::cate::{cate_learner, CateConfig};
use causal_stack::learners::ppca::{fit_ppca, PpcaConfig};
use causal_stack::sim::{simulate_dataset, SimConfig};

fn main() -> causal_stack::Result<()> {
    let (ds, truth) = simulate_dataset(&SimConfig {
        n_individuals: 2000,
        n_snps: 400,
        effect_sd: 1.0,
        seed: 3,
        ..SimConfig::default()
    })?;
    let ppca = fit_ppca(&ds, &PpcaConfig { k: 5, ..PpcaConfig::default() })?;
    println!("PPCA: k={}, {} EM iterations", ppca.k(), ppca.n_iter());

    let out = cate_learner(&ds, &ppca.z, &CateConfig::default())?;
    let err = pehe(&out.phi, &truth.tau_true)?;
    let magnitude: Vec<f64> = out.phi.iter().map(|p| p.abs()).collect();
    let prf = precision_recall_f1(&out.causal_call, &truth.causal_mask)?;
    println!("pehe_sq {:.3e} (raw {:+.3e})", err.sq, err.raw);
    println!("AUC of |phi| {:.3}", roc_auc(&magnitude, &truth.causal_mask)?);
    println!("top-10% calls: precision {:.3} recall {:.3} F1 {:.3}", prf.precision, prf.recall, prf.f1);

    let mut order: Vec<usize> = (0..out.phi.len()).collect();
    order.sort_by(|&a, &b| magnitude[b].total_cmp(&magnitude[a]));
    println!("{:>8} {:>10} {:>10} causal", "snp", "phi", "tau_true");
    for &v in &order[..8] {
        println!(
            "{:>8} {:>10.4} {:>10.4} {}",
            out.variable_names[v], out.phi[v], truth.tau_true[v], truth.causal_mask[v]
        );
    }
    Ok(())
}

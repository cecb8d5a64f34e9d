//! Effect recovery by stacking: a regressor on the learners' signed effects is
//! trained on the revealed causes and scored by PEHE on held-out SNPs against
//! each learner's own effect estimates.
//!
//! cargo run --release --example pehe -- [proportion]

use causal_stack::data::mask_known_causes;
use causal_stack::eval::pehe;
use causal_stack::learners::cate::{cate_learner, CateConfig};
use causal_stack::learners::deconfounder::{run_da_learner, DeconfounderConfig};
use causal_stack::learners::marginal::run_marginal_learner;
use causal_stack::learners::BinarizeStrategy;
use causal_stack::pipeline::{fit_te_on_revealed, TE_FEATURES};
use causal_stack::sim::{simulate_dataset, SimConfig};
use causal_stack::stack::{assemble, default_split};

fn main() -> causal_stack::Result<()> {
    let proportion: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.6);
    let (ds, truth) = simulate_dataset(&SimConfig {
        n_individuals: 1000,
        n_snps: 600,
        seed: 12,
        ..SimConfig::default()
    })?;
    let da = run_da_learner(&ds, &DeconfounderConfig::default())?;
    let cate = cate_learner(&ds, da.proxies(), &CateConfig::default())?;
    let marginal = run_marginal_learner(&ds, BinarizeStrategy::top_fraction())?;

    let labels = mask_known_causes(&truth.causal_mask, proportion, 1)?;
    let l1 = default_split(&assemble(&[da.output, cate, marginal], &labels, false)?, 2)?;
    let te = fit_te_on_revealed(&l1, &truth.tau_true)?;
    let test = &l1.split()?.test;
    let tau_test: Vec<f64> = test.iter().map(|&i| truth.tau_true[i]).collect();

    let stacked = te.predict(&l1.features(TE_FEATURES)?.select_rows(test));
    let p = pehe(&stacked, &tau_test)?;
    println!("{:<24} pehe_sq {:.3e} pehe_raw {:+.3e}", "stacked TE", p.sq, p.raw);
    for (f, name) in l1.feature_names.iter().enumerate() {
        let own: Vec<f64> = test.iter().map(|&i| l1.d1[(i, f)]).collect();
        let p = pehe(&own, &tau_test)?;
        println!("{name:<24} pehe_sq {:.3e} pehe_raw {:+.3e}", p.sq, p.raw);
    }
    Ok(())
}

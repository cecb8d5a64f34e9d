//! One pass of stacking by hand: three level-0 learners, a masked set of known
//! causes, level-1 assembly and every meta-learner scored on held-out SNPs.
//!
//! cargo run --release --example stacking -- [proportion]

use causal_stack::data::mask_known_causes;
use causal_stack::eval::{compare_learners_vs_meta, ModelCalls, ModelRole};
use causal_stack::learners::cate::{cate_learner, CateConfig};
use causal_stack::learners::deconfounder::{run_da_learner, DeconfounderConfig};
use causal_stack::learners::marginal::run_marginal_learner;
use causal_stack::learners::BinarizeStrategy;
use causal_stack::meta::{fit_all, predict_test, MetaConfig, MetaKind};
use causal_stack::sim::{simulate_dataset, SimConfig};
use causal_stack::stack::{assemble, default_split};

fn main() -> causal_stack::Result<()> {
    let proportion: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let (ds, truth) = simulate_dataset(&SimConfig {
        n_individuals: 1000,
        n_snps: 600,
        seed: 11,
        ..SimConfig::default()
    })?;

    let da = run_da_learner(&ds, &DeconfounderConfig::default())?;
    let cate = cate_learner(&ds, da.proxies(), &CateConfig::default())?;
    let marginal = run_marginal_learner(&ds, BinarizeStrategy::top_fraction())?;

    let labels = mask_known_causes(&truth.causal_mask, proportion, 5)?;
    println!("{} of {} causes revealed", labels.n_positive(), truth.causal_mask.iter().filter(|&&c| c).count());
    let l1 = default_split(&assemble(&[da.output, cate, marginal], &labels, false)?, 6)?;

    let cfg = MetaConfig { seed: 7, ..MetaConfig::default() };
    let models = fit_all(&l1, &cfg)?;
    let preds = predict_test(&models, &l1, cfg.features)?;

    let test_truth: Vec<bool> = preds.rows.iter().map(|&i| truth.causal_mask[i]).collect();
    let learners: Vec<ModelCalls> = l1
        .feature_names
        .iter()
        .enumerate()
        .map(|(f, name)| ModelCalls {
            name: name.clone(),
            role: ModelRole::Learner,
            calls: preds.rows.iter().map(|&i| l1.calls[f][i]).collect(),
            scores: preds.rows.iter().map(|&i| l1.d1[(i, f)].abs()).collect(),
        })
        .collect();
    let metas: Vec<ModelCalls> = preds
        .models
        .iter()
        .enumerate()
        .map(|(m, name)| ModelCalls {
            name: name.clone(),
            role: if name == MetaKind::Random.name() { ModelRole::Baseline } else { ModelRole::Meta },
            calls: preds.calls[m].clone(),
            scores: preds.scores[m].clone(),
        })
        .collect();
    let report = compare_learners_vs_meta(&learners, &metas, &test_truth)?;

    println!("{:<20} {:>9} {:>9} {:>9} {:>9}", "model", "precision", "recall", "f1", "auc");
    for i in 0..report.models.len() {
        let auc = report.auc[i].map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<20} {:>9.3} {:>9.3} {:>9.3} {:>9}",
            report.models[i], report.precision[i], report.recall[i], report.f1[i], auc
        );
    }
    println!("Q_av {:.3} over {} test SNPs", report.q_av, report.n_test);
    Ok(())
}

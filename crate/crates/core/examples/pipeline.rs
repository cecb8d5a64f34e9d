//! The whole run from a config: simulate, learn, stack, meta, eval, with
//! artifacts written under a scratch directory. A second call reuses them.
//!
//! cargo run --release --example pipeline -- [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use causal_stack::config::RunConfig;
use causal_stack::eval::ModelRole;
use causal_stack::pipeline::{run_until, Run, RunOptions, Stage};
use causal_stack::sim::SimConfig;

fn main() -> causal_stack::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("causal-stack-example"));
    let mut cfg = RunConfig::simulated(
        SimConfig {
            n_individuals: 600,
            n_snps: 600,
            ..SimConfig::default()
        },
        2,
    );
    cfg.master_seed = 42;
    cfg.masking = vec![0.3, 0.7];
    let opts = RunOptions {
        out: Some(out),
        force: true,
        verbose: false,
    };

    let t = Instant::now();
    let run = Run::open(cfg.clone(), &opts)?;
    let reports = run_until(&run, Stage::Eval)?;
    println!("first run {:.1?}", t.elapsed());
    for r in &reports {
        let (meta, f1) = r.report.best_f1(ModelRole::Meta).unwrap_or_default();
        let (learner, lf1) = r.report.best_f1(ModelRole::Learner).unwrap_or_default();
        println!(
            "{} p={:.1}: {meta} F1 {f1:.3} vs {learner} F1 {lf1:.3}, Q_av {:.3}",
            r.unit, r.proportion, r.report.q_av
        );
    }

    let t = Instant::now();
    let again = Run::open(cfg, &RunOptions { force: false, ..opts })?;
    run_until(&again, Stage::Eval)?;
    println!("resumed in {:.1?}; artifacts in {}", t.elapsed(), again.out.display());
    Ok(())
}

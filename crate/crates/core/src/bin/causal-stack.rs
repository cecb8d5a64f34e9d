use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causal_stack::config::{LearnerSpec, RunConfig};
use causal_stack::eval::ModelRole;
use causal_stack::pipeline::{self, Run, RunOptions, Stage, UnitReport};

#[derive(Parser)]
#[command(name = "causal-stack", version, about = "Stacked causal discovery with partially known causes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw simulated GWAS datasets and their ground truth.
    Simulate(Common),
    /// Run the level-0 learners (simulating first if needed).
    Learn(Common),
    /// Assemble level-1 data for every masking proportion.
    Stack(Common),
    /// Fit the meta-learners and predict the test variables.
    Meta(Common),
    /// Score learners and meta-learners; writes metrics and sweep tables.
    Eval(Common),
    /// Every stage end to end.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats CAUSAL_STACK_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an output directory holding another configuration's results.
    #[arg(long)]
    force: bool,
    /// Factor counts for every deconfounder, e.g. `10,15,20`.
    #[arg(long, value_delimiter = ',')]
    k_grid: Vec<usize>,
    #[arg(long, short)]
    quiet: bool,
}

fn open(c: &Common) -> causal_stack::Result<Run> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.master_seed = seed;
    }
    if !c.k_grid.is_empty() {
        for l in &mut cfg.learners {
            if let LearnerSpec::Deconfounder { k_grid, .. } = l {
                *k_grid = c.k_grid.clone();
            }
        }
    }
    Run::open(
        cfg,
        &RunOptions {
            out: c.out.clone(),
            force: c.force,
            verbose: !c.quiet,
        },
    )
}

fn print_summary(reports: &[UnitReport]) {
    for r in reports {
        let m = &r.report;
        let best = |role| m.best_f1(role).map(|(n, f)| format!("{n} {f:.3}")).unwrap_or_else(|| "-".into());
        let pehe = m.pehe_sq.map(|p| format!(" pehe_sq {p:.3e}")).unwrap_or_default();
        println!(
            "{} p={:.2}: best learner {} | best meta {} | Q_av {:.3}{pehe}",
            r.unit,
            r.proportion,
            best(ModelRole::Learner),
            best(ModelRole::Meta),
            m.q_av
        );
    }
}

fn execute(command: &Command) -> causal_stack::Result<Run> {
    let (c, stage) = match command {
        Command::Simulate(c) => (c, Stage::Simulate),
        Command::Learn(c) => (c, Stage::Learn),
        Command::Stack(c) => (c, Stage::Stack),
        Command::Meta(c) => (c, Stage::Meta),
        Command::Eval(c) | Command::Pipeline(c) => (c, Stage::Eval),
    };
    let run = open(c)?;
    let reports = pipeline::run_until(&run, stage)?;
    print_summary(&reports);
    Ok(run)
}

fn main() -> ExitCode {
    match execute(&Cli::parse().command) {
        Ok(run) => {
            println!("results in {}", run.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irens::experiment::{Experiment, ExperimentConfig, Method, StageError, StageOutcome};

/// Iterative-regularization ensemble experiments on the desk reservoir.
#[derive(Parser)]
#[command(name = "irens", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the base seed of every method block.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic truth from the prior.
    GenerateTruth,
    /// Simulate the truth and add measurement noise.
    Synthesize,
    /// Run every configured block of a method: ir-enlm, ir-es, es, rml or mcmc.
    Run { method: String },
    /// Score the finished runs against the MCMC reference.
    Evaluate,
    /// Print the comparison table.
    Report,
}

fn report(outcome: StageOutcome, name: &str) {
    match outcome {
        StageOutcome::Ran => eprintln!("{name}: done"),
        StageOutcome::UpToDate => eprintln!("{name}: up to date, nothing to do"),
    }
}

fn run(cli: Cli) -> Result<(), StageError> {
    let path = cli
        .config
        .ok_or_else(|| StageError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(&path).map_err(StageError::Config)?;
    if let Some(seed) = cli.seed_override {
        config.seeds.ensemble = seed;
        for b in &mut config.ir_enlm {
            b.seed = None;
        }
        for b in &mut config.ir_es {
            b.seed = None;
        }
        for b in &mut config.es {
            b.seed = None;
        }
        for b in &mut config.rml {
            b.seed = None;
        }
    }
    if let Some(k) = cli.jobs {
        if k == 0 {
            return Err(StageError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| StageError::Config(e.to_string()))?;
    }
    let out = cli
        .out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| StageError::Config("no output directory: pass --out or set output_dir".into()))?;
    let mut exp = Experiment::open(config, out)?;
    match cli.command {
        Command::GenerateTruth => report(exp.generate_truth()?, "generate-truth"),
        Command::Synthesize => report(exp.synthesize()?, "synthesize"),
        Command::Run { method } => {
            let m = Method::parse(&method).ok_or_else(|| {
                StageError::Config(format!(
                    "unknown method `{method}`; expected one of ir-enlm, ir-es, es, rml, mcmc"
                ))
            })?;
            for (name, outcome) in exp.run_method(m)? {
                report(outcome, &name);
            }
        }
        Command::Evaluate => report(exp.evaluate()?, "evaluate"),
        Command::Report => {
            let (outcome, text) = exp.report()?;
            print!("{text}");
            report(outcome, "report");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

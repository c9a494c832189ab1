//! The full staged pipeline driven from a configuration file, as the
//! `irens` binary does: truth, data, every method, the MCMC reference,
//! evaluation and the comparison table. A second pass is a no-op.
//!
//! cargo run --release --example experiment_pipeline [-- config.toml [out_dir]]

use irens::experiment::{Experiment, ExperimentConfig, Method};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let cfg_path = args
        .get(1)
        .cloned()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/smoke.toml").into());
    let out = args
        .get(2)
        .cloned()
        .unwrap_or_else(|| std::env::temp_dir().join("irens-pipeline").display().to_string());
    let config = ExperimentConfig::load(cfg_path.as_ref())?;
    for pass in 0..2 {
        let mut exp = Experiment::open(config.clone(), &out)?;
        let mut log = vec![("generate-truth".to_string(), exp.generate_truth()?)];
        log.push(("synthesize".into(), exp.synthesize()?));
        for m in Method::ALL {
            log.extend(exp.run_method(m)?);
        }
        log.push(("evaluate".into(), exp.evaluate()?));
        let (outcome, table) = exp.report()?;
        log.push(("report".into(), outcome));
        println!("pass {pass}:");
        for (stage, outcome) in log {
            println!("  {stage:<28} {outcome:?}");
        }
        if pass == 0 {
            println!("\n{table}");
        }
    }
    println!("artifacts in {out}");
    Ok(())
}

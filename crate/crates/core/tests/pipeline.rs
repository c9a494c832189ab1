use std::path::{Path, PathBuf};
use std::process::Command;

use irens::experiment::manifest::list_files;
use irens::experiment::{Experiment, ExperimentConfig, Method, StageError, StageOutcome, TruthMeta};

fn smoke_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/smoke.toml")
}

fn smoke() -> ExperimentConfig {
    ExperimentConfig::load(&smoke_path()).unwrap()
}

fn run_all(exp: &mut Experiment) -> Vec<StageOutcome> {
    let mut out = vec![exp.generate_truth().unwrap(), exp.synthesize().unwrap()];
    for m in [Method::IrEnlm, Method::IrEs, Method::Es, Method::Rml, Method::Mcmc] {
        out.extend(exp.run_method(m).unwrap().into_iter().map(|(_, o)| o));
    }
    out.push(exp.evaluate().unwrap());
    out.push(exp.report().unwrap().0);
    out
}

#[test]
fn truth_is_deterministic_and_whitens() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let mut exp = Experiment::open(smoke(), d.path()).unwrap();
        assert_eq!(exp.generate_truth().unwrap(), StageOutcome::Ran);
    }
    let ta = std::fs::read(a.path().join("truth/truth.f64")).unwrap();
    let tb = std::fs::read(b.path().join("truth/truth.f64")).unwrap();
    assert_eq!(ta, tb);

    let meta: TruthMeta =
        serde_json::from_slice(&std::fs::read(a.path().join("truth/meta.json")).unwrap()).unwrap();
    let n = (meta.nx * meta.ny) as f64;
    assert!(meta.whitened_mean.abs() < 4.0 / n.sqrt(), "{meta:?}");
    assert!((meta.whitened_variance - 1.0).abs() < 0.3, "{meta:?}");
}

#[test]
fn full_pass_is_complete_and_rerun_is_noop() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(smoke(), dir.path()).unwrap();
    assert!(run_all(&mut exp).iter().all(|o| *o == StageOutcome::Ran));
    assert!(exp.manifest().completeness_problems(dir.path()).unwrap().is_empty());
    let files = list_files(dir.path()).unwrap();
    let snapshot: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();

    let mut again = Experiment::open(smoke(), dir.path()).unwrap();
    assert!(run_all(&mut again).iter().all(|o| *o == StageOutcome::UpToDate));
    assert_eq!(list_files(dir.path()).unwrap(), files);
    for (f, bytes) in files.iter().zip(&snapshot) {
        assert_eq!(&std::fs::read(dir.path().join(f)).unwrap(), bytes, "{f} changed");
    }
}

#[test]
fn noise_seed_change_reruns_synthesis_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(smoke(), dir.path()).unwrap();
    exp.generate_truth().unwrap();
    exp.synthesize().unwrap();
    let before = std::fs::read(dir.path().join("data/observations.csv")).ok();

    let mut cfg = smoke();
    cfg.seeds.noise += 1;
    let mut exp = Experiment::open(cfg, dir.path()).unwrap();
    assert_eq!(exp.generate_truth().unwrap(), StageOutcome::UpToDate);
    assert_eq!(exp.synthesize().unwrap(), StageOutcome::Ran);
    if let Some(before) = before {
        assert_ne!(std::fs::read(dir.path().join("data/observations.csv")).unwrap(), before);
    }
}

#[test]
fn tampered_output_forces_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(smoke(), dir.path()).unwrap();
    exp.generate_truth().unwrap();
    let p = dir.path().join("truth/truth.f64");
    let original = std::fs::read(&p).unwrap();
    let mut bytes = original.clone();
    bytes[0] ^= 1;
    std::fs::write(&p, bytes).unwrap();

    let mut exp = Experiment::open(smoke(), dir.path()).unwrap();
    assert_eq!(exp.generate_truth().unwrap(), StageOutcome::Ran);
    assert_eq!(std::fs::read(&p).unwrap(), original);
}

#[test]
fn missing_dependency_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(smoke(), dir.path()).unwrap();
    match exp.synthesize() {
        Err(e @ StageError::Missing(_)) => {
            assert_eq!(e.exit_code(), 4);
            assert!(e.to_string().contains("generate-truth"), "{e}");
        }
        other => panic!("expected a missing-stage error, got {other:?}"),
    }
    assert!(matches!(exp.evaluate(), Err(StageError::Missing(_))));
}

#[test]
fn invalid_config_is_rejected() {
    let text = std::fs::read_to_string(smoke_path()).unwrap();
    let bad = text.replace("replications = 1", "replications = 0");
    assert!(ExperimentConfig::from_toml(&bad).is_err());
    let bad = text.replace("rho = 0.8", "rho = 1.5");
    assert!(ExperimentConfig::from_toml(&bad).is_err());
}

fn irens(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_irens"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = smoke_path();
    let cfg = cfg.to_str().unwrap();

    assert_eq!(irens(&["--config", "/nonexistent.toml", "--out", out, "evaluate"]).status.code(), Some(2));
    assert_eq!(irens(&["--config", cfg, "--out", out, "run", "bogus"]).status.code(), Some(2));
    assert_eq!(irens(&["--config", cfg, "--out", out, "--jobs", "0", "evaluate"]).status.code(), Some(2));
    assert_eq!(irens(&["--config", cfg, "--out", out, "frobnicate"]).status.code(), Some(2));

    let missing = irens(&["--config", cfg, "--out", out, "synthesize"]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("generate-truth"));

    assert_eq!(irens(&["--config", cfg, "--out", out, "generate-truth"]).status.code(), Some(0));
    let rerun = irens(&["--config", cfg, "--out", out, "generate-truth"]);
    assert_eq!(rerun.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&rerun.stderr).contains("up to date"));
}

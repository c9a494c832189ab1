//! Experiment pipeline: truth → synthetic data → {MCMC reference, method
//! runs} → evaluation → report, with every stage's artifacts recorded in a
//! digest manifest so reruns are skipped and missing inputs are detected.
//!
//! Output layout under the output directory:
//!
//! ```text
//! manifest.json
//! truth/truth.f64, truth/meta.json
//! data/{y,gamma,clean}.f64, data/observations.csv, data/meta.json
//! runs/<method>/<label>/rep_NNN/...         (see ensemble::write_run)
//! mcmc/{mean,variance}.f64, mcmc/{summary.json,tuning.csv,chains.csv}
//! mcmc/chains/chain_NNN/...                 (checkpoints, when enabled)
//! eval/{comparison.csv,replications.csv,boxplot_misfit.csv,gold.json}
//! report/report.txt
//! ```

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Method, MethodRun, MethodSpec};
pub use manifest::{RunManifest, StageRecord};

use crate::baselines::{rml_ensemble, rml_objective_at, standard_es};
use crate::ensemble::{
    contract_violations, ensemble_mean, ensemble_variance, initial_ensemble, read_members,
    read_summary, write_run, RunResult,
};
use crate::error::Error;
use crate::field::{Field, GaussianPrior};
use crate::forward::ForwardModel;
use crate::io::{read_f64s, sha256_bytes, write_bytes, write_f64s};
use crate::metrics::{
    comparison_csv, five_number, boxplot_csv, relative_errors, ComparisonReport, FiveNumber,
};
use crate::observations::{perturb, synthesize, write_observations_csv, NoiseDraw, ObservationSet};
use crate::rng::{derive_seed, tag};
use crate::{ir_enlm, ir_es, mcmc};
use manifest::{digest_all, stage_key};

/// Failure of a pipeline stage, mapped to the CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing dependency stage `{0}`; run it first")]
    Missing(String),
    #[error("stage `{stage}` failed: {source}")]
    Failed {
        stage: String,
        #[source]
        source: Error,
    },
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Config(_) => 2,
            StageError::Failed { .. } => 3,
            StageError::Missing(_) => 4,
        }
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

fn failed(stage: &str) -> impl Fn(Error) -> StageError + '_ {
    move |source| StageError::Failed {
        stage: stage.to_string(),
        source,
    }
}

/// What a stage call did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// The manifest already records this stage with the same key and
    /// intact outputs.
    UpToDate,
}

pub const TRUTH_STAGE: &str = "generate-truth";
pub const DATA_STAGE: &str = "synthesize";
pub const MCMC_STAGE: &str = "run:mcmc";
pub const EVAL_STAGE: &str = "evaluate";
pub const REPORT_STAGE: &str = "report";

pub fn run_stage_name(method: Method, label: &str) -> String {
    format!("run:{}:{label}", method.name())
}

/// Seed of replication `r` of a block with base seed `seed`.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, &[tag::REPLICATION, r as u64])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthMeta {
    pub nx: usize,
    pub ny: usize,
    /// Mean and variance across cells of `L⁻¹(u† − ū)`.
    pub whitened_mean: f64,
    pub whitened_variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataMeta {
    pub n_data: usize,
    pub eta: f64,
    pub realized_noise_level: f64,
    /// `‖Γ^{-1/2}ξ‖ / ‖Γ^{-1/2}G(u†)‖`.
    pub noise_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcSummary {
    pub beta: f64,
    pub n_chains: usize,
    pub chain_length: usize,
    pub burn_in: usize,
    pub retained_per_chain: usize,
    pub acceptance: Vec<f64>,
    /// Maximum per-cell PSRF; absent when it could not be computed.
    pub max_psrf: Option<f64>,
    pub converged: bool,
}

pub const PSRF_GATE: f64 = 1.1;

/// A configured experiment bound to an output directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    manifest: RunManifest,
}

impl Experiment {
    pub fn open(config: ExperimentConfig, out: impl Into<PathBuf>) -> StageResult<Self> {
        config.validate().map_err(StageError::Config)?;
        let out = out.into();
        std::fs::create_dir_all(&out)
            .map_err(|e| StageError::Config(format!("{}: {e}", out.display())))?;
        let mut manifest = RunManifest::load(&out).map_err(failed("manifest"))?;
        let json = serde_json::to_string(&config).expect("serializable config");
        manifest.config_hash = sha256_bytes(json.as_bytes());
        manifest.code_version = env!("CARGO_PKG_VERSION").to_string();
        Ok(Self {
            config,
            out,
            manifest,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, stage: &str) -> StageResult<BTreeMap<String, String>> {
        self.manifest
            .verified_outputs(&self.out, stage)
            .cloned()
            .ok_or_else(|| StageError::Missing(stage.to_string()))
    }

    /// Runs `body` unless the stage is current; records its outputs.
    fn stage<K: Serialize>(
        &mut self,
        name: &str,
        fragment: &K,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&Self) -> crate::Result<(Vec<PathBuf>, u64)>,
    ) -> StageResult<StageOutcome> {
        let key = stage_key(fragment, &inputs);
        if self.manifest.is_current(&self.out, name, &key) {
            log::info!("{name}: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        // stale outputs of an earlier version of this stage are removed so the
        // directory only ever holds manifest-listed files
        if let Some(old) = self.manifest.stages.remove(name) {
            for p in old.outputs.keys() {
                let _ = std::fs::remove_file(self.out.join(p));
            }
        }
        let t0 = Instant::now();
        log::info!("{name}: running");
        let (paths, forward_calls) = body(self).map_err(failed(name))?;
        let outputs = digest_all(&self.out, &paths).map_err(failed(name))?;
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                key,
                inputs,
                outputs,
                seconds: t0.elapsed().as_secs_f64(),
                forward_calls,
            },
        );
        self.manifest.save(&self.out).map_err(failed(name))?;
        Ok(StageOutcome::Ran)
    }

    pub fn generate_truth(&mut self) -> StageResult<StageOutcome> {
        let fragment = (
            self.config.prior,
            self.config.reservoir.model_config().geometry,
            self.config.seeds.truth,
        );
        self.stage(TRUTH_STAGE, &fragment, BTreeMap::new(), |x| {
            let prior = x.config.prior()?;
            let mut rng = crate::rng::substream(x.config.seeds.truth, &[tag::TRUTH]);
            let truth = prior.draw(&mut rng);
            let white = prior.whiten(&(&truth - &prior.mean.values))?;
            let n = white.len() as f64;
            let mean = white.sum() / n;
            let meta = TruthMeta {
                nx: prior.geometry().nx,
                ny: prior.geometry().ny,
                whitened_mean: mean,
                whitened_variance: white.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n,
            };
            let tp = x.path("truth/truth.f64");
            write_f64s(&tp, truth.as_slice())?;
            let mp = x.path("truth/meta.json");
            write_json(&mp, &meta)?;
            Ok((vec![tp, mp], 0))
        })
    }

    pub fn truth(&self) -> StageResult<Field> {
        self.require(TRUTH_STAGE)?;
        let geometry = self.config.reservoir.model_config().geometry;
        crate::io::read_field(&self.path("truth/truth.f64"), geometry).map_err(failed(TRUTH_STAGE))
    }

    pub fn synthesize(&mut self) -> StageResult<StageOutcome> {
        let inputs = self.require(TRUTH_STAGE)?;
        let truth = self.truth()?;
        let fragment = (self.config.reservoir.clone(), self.config.seeds.noise);
        self.stage(DATA_STAGE, &fragment, inputs, |x| {
            let cfg = x.config.reservoir.model_config();
            let obs = synthesize(&truth, &cfg, x.config.seeds.noise, NoiseDraw::Sampled)?;
            let clean = obs.clean.clone().expect("synthesized data keep G(u†)");
            let realized = obs.realized_noise_level.unwrap_or(0.0);
            let meta = DataMeta {
                n_data: obs.len(),
                eta: obs.eta,
                realized_noise_level: realized,
                noise_ratio: realized / obs.weighted_norm(&clean),
            };
            log::info!(
                "realized noise is {:.1}% of the weighted data norm",
                100.0 * meta.noise_ratio
            );
            let mut paths = Vec::new();
            for (name, v) in [("y", &obs.y), ("gamma", &obs.gamma_diag), ("clean", &clean)] {
                let p = x.path(&format!("data/{name}.f64"));
                write_f64s(&p, v.as_slice())?;
                paths.push(p);
            }
            let p = x.path("data/observations.csv");
            write_observations_csv(&p, &obs)?;
            paths.push(p);
            let p = x.path("data/meta.json");
            write_json(&p, &meta)?;
            paths.push(p);
            Ok((paths, 1))
        })
    }

    /// The synthesized observations as stored on disk.
    pub fn observations(&self) -> StageResult<ObservationSet> {
        self.require(DATA_STAGE)?;
        let load = || -> crate::Result<ObservationSet> {
            let y = DVector::from_vec(read_f64s(&self.path("data/y.f64"))?);
            let gamma = DVector::from_vec(read_f64s(&self.path("data/gamma.f64"))?);
            let clean = DVector::from_vec(read_f64s(&self.path("data/clean.f64"))?);
            let meta: DataMeta = read_json(&self.path("data/meta.json"))?;
            let layout = self.config.reservoir.model_config().measurement_layout();
            let mut obs = ObservationSet::new(y, gamma, meta.eta, layout)?;
            obs.realized_noise_level = Some(meta.realized_noise_level);
            obs.clean = Some(clean);
            Ok(obs)
        };
        load().map_err(failed(DATA_STAGE))
    }

    /// Runs every configured block of `method`.
    pub fn run_method(&mut self, method: Method) -> StageResult<Vec<(String, StageOutcome)>> {
        if method == Method::Mcmc {
            return Ok(vec![(MCMC_STAGE.to_string(), self.run_mcmc()?)]);
        }
        let runs: Vec<MethodRun> = self
            .config
            .method_runs()
            .into_iter()
            .filter(|r| r.method == method)
            .collect();
        if runs.is_empty() {
            return Err(StageError::Config(format!(
                "no [[{}]] block in the configuration",
                method.name().replace('-', "_")
            )));
        }
        let mut done = Vec::new();
        for r in runs {
            let name = run_stage_name(method, &r.label);
            let outcome = self.run_block(&name, &r)?;
            done.push((name, outcome));
        }
        Ok(done)
    }

    fn run_block(&mut self, name: &str, run: &MethodRun) -> StageResult<StageOutcome> {
        let inputs = self.require(DATA_STAGE)?;
        let obs = self.observations()?;
        let fragment = (&run.spec, run.seed, run.replications, self.config.prior, self.config.reservoir.clone());
        self.stage(name, &fragment, inputs, |x| {
            let prior = x.config.prior()?;
            let forward = x.config.forward()?;
            let mut paths = Vec::new();
            let mut calls = 0;
            for r in 0..run.replications {
                let seed = replication_seed(run.seed, r);
                let result = execute(&run.spec, &prior, &obs, &forward, seed)?;
                let violations = contract_violations(&result);
                if !violations.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "discrepancy contract violated in replication {r}: {}",
                        violations.join("; ")
                    )));
                }
                calls += result.forward_calls + result.diagnostic_calls;
                let dir = x.path(&format!("runs/{}/{}/rep_{r:03}", run.method.name(), run.label));
                paths.extend(write_run(&dir, &result)?);
            }
            Ok((paths, calls))
        })
    }

    pub fn run_mcmc(&mut self) -> StageResult<StageOutcome> {
        let params = self
            .config
            .mcmc
            .ok_or_else(|| StageError::Config("no [mcmc] section in the configuration".into()))?;
        let inputs = self.require(DATA_STAGE)?;
        let obs = self.observations()?;
        let fragment = (params, self.config.seeds.mcmc, self.config.prior, self.config.reservoir.clone());
        self.stage(MCMC_STAGE, &fragment, inputs, |x| {
            let prior = x.config.prior()?;
            let forward = x.config.forward()?;
            let potential = mcmc::DataMisfit::new(&forward, &obs);
            let ckpt = x.path("mcmc/chains");
            let set = mcmc::run_chains(
                &prior,
                &potential,
                &params,
                x.config.seeds.mcmc,
                (params.checkpoint_every > 0).then_some(ckpt.as_path()),
            )?;
            let burn_in = params.burn_in_steps();
            let max_psrf = match mcmc::max_cell_psrf(&set.chains, burn_in) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("PSRF unavailable: {e}");
                    None
                }
            };
            let (mean, var) = mcmc::posterior_moments(&set.chains, burn_in, 1)?;
            let summary = McmcSummary {
                beta: set.beta,
                n_chains: set.chains.len(),
                chain_length: params.chain_length,
                burn_in,
                retained_per_chain: set.chains[0].steps.iter().filter(|s| **s > burn_in).count(),
                acceptance: set.chains.iter().map(|c| c.acceptance_rate()).collect(),
                max_psrf,
                converged: max_psrf.is_some_and(|p| p < PSRF_GATE),
            };
            if !summary.converged {
                log::warn!("MCMC reference not converged (max PSRF {max_psrf:?})");
            }
            let mut paths = Vec::new();
            for (name, v) in [("mean", &mean), ("variance", &var)] {
                let p = x.path(&format!("mcmc/{name}.f64"));
                write_f64s(&p, v.as_slice())?;
                paths.push(p);
            }
            let mut tuning = String::from("round,beta,acceptance\n");
            for (k, (b, a)) in set.tuning.iter().enumerate() {
                tuning.push_str(&format!("{k},{b:e},{a}\n"));
            }
            let mut chains = String::from("chain,steps,accepted,acceptance,final_phi\n");
            for c in &set.chains {
                chains.push_str(&format!(
                    "{},{},{},{},{:e}\n",
                    c.chain,
                    c.total,
                    c.accepted,
                    c.acceptance_rate(),
                    c.phis.last().copied().unwrap_or(f64::NAN)
                ));
            }
            for (name, text) in [("tuning.csv", tuning), ("chains.csv", chains)] {
                let p = x.path(&format!("mcmc/{name}"));
                write_bytes(&p, text.as_bytes())?;
                paths.push(p);
            }
            let p = x.path("mcmc/summary.json");
            write_json(&p, &summary)?;
            paths.push(p);
            if ckpt.exists() {
                paths.extend(
                    manifest::list_files(&ckpt)?
                        .into_iter()
                        .map(|rel| ckpt.join(rel)),
                );
            }
            let steps = params.n_chains * params.chain_length
                + if params.tune { params.tune_round_steps * set.tuning.len() } else { 0 };
            Ok((paths, steps as u64 + params.n_chains as u64))
        })
    }

    /// Reference posterior moments `(mean, variance)` and their summary.
    pub fn gold(&self) -> StageResult<(DVector<f64>, DVector<f64>, McmcSummary)> {
        self.require(MCMC_STAGE)?;
        let load = || -> crate::Result<_> {
            Ok((
                DVector::from_vec(read_f64s(&self.path("mcmc/mean.f64"))?),
                DVector::from_vec(read_f64s(&self.path("mcmc/variance.f64"))?),
                read_json(&self.path("mcmc/summary.json"))?,
            ))
        };
        load().map_err(failed(MCMC_STAGE))
    }

    /// Completed method blocks, in configuration order.
    fn completed_runs(&self) -> Vec<MethodRun> {
        self.config
            .method_runs()
            .into_iter()
            .filter(|r| {
                self.manifest
                    .verified_outputs(&self.out, &run_stage_name(r.method, &r.label))
                    .is_some()
            })
            .collect()
    }

    pub fn evaluate(&mut self) -> StageResult<StageOutcome> {
        let mut inputs = self.require(MCMC_STAGE)?;
        let runs = self.completed_runs();
        if runs.is_empty() {
            return Err(StageError::Missing("run <method>".into()));
        }
        for r in &runs {
            inputs.extend(self.require(&run_stage_name(r.method, &r.label))?);
        }
        inputs.extend(self.require(DATA_STAGE)?);
        let obs = self.observations()?;
        let (post_mean, post_var, gold) = self.gold()?;
        let labels: Vec<String> = runs.iter().map(|r| run_stage_name(r.method, &r.label)).collect();
        self.stage(EVAL_STAGE, &labels, inputs, |x| {
            let prior = x.config.prior()?;
            let forward = x.config.forward()?;
            let area = prior.geometry().cell_area();
            let mut rows = Vec::new();
            let mut reps = String::from("method,label,replication,eps_u,eps_sigma,avg_iterations,forward_calls\n");
            let mut boxes = Vec::new();
            let mut calls = 0;
            for r in &runs {
                let mut acc = (0.0, 0.0, 0.0, 0.0);
                for k in 0..r.replications {
                    let dir = x.path(&format!("runs/{}/{}/rep_{k:03}", r.method.name(), r.label));
                    let summary = read_summary(&dir)?;
                    let members = read_members(&dir, summary.n_members)?;
                    let e = relative_errors(
                        &ensemble_mean(&members),
                        &ensemble_variance(&members),
                        &post_mean,
                        &post_var,
                        &prior.mean.values,
                        area,
                    )?;
                    reps.push_str(&format!(
                        "{},{},{k},{:.6},{:.6},{:.3},{}\n",
                        r.method.name(),
                        r.label,
                        e.eps_u,
                        e.eps_sigma,
                        summary.average_iterations,
                        summary.forward_calls
                    ));
                    acc.0 += e.eps_u;
                    acc.1 += e.eps_sigma;
                    acc.2 += summary.average_iterations;
                    acc.3 += summary.forward_calls as f64;
                }
                let (misfits, used) = member_misfits(x, r, &prior, &obs, &forward)?;
                calls += used;
                let fives = five_number(&misfits)?;
                boxes.push((format!("{}:{}", r.method.name(), r.label), fives));
                let n = r.replications as f64;
                let (rho, tau, m_es) = match &r.spec {
                    MethodSpec::IrEnlm(p) => (Some(p.rho), Some(p.tau), None),
                    MethodSpec::IrEs(p) => (Some(p.rho), Some(p.tau), Some(p.m_es)),
                    _ => (None, None, None),
                };
                rows.push(ComparisonReport {
                    method: format!("{}:{}", r.method.name(), r.label),
                    rho,
                    tau,
                    n_e: r.spec.n_e(),
                    m_es,
                    eps_u: acc.0 / n,
                    eps_sigma: acc.1 / n,
                    avg_iterations: acc.2 / n,
                    forward_calls: (acc.3 / n).round() as u64,
                    misfit_summary: Some(fives),
                });
            }
            let mut paths = Vec::new();
            for (name, text) in [
                ("comparison.csv", comparison_csv(&rows)),
                ("replications.csv", reps),
                ("boxplot_misfit.csv", boxplot_csv(&boxes)),
            ] {
                let p = x.path(&format!("eval/{name}"));
                write_bytes(&p, text.as_bytes())?;
                paths.push(p);
            }
            let p = x.path("eval/gold.json");
            write_json(&p, &gold)?;
            paths.push(p);
            Ok((paths, calls))
        })
    }

    /// Comparison rows of the last evaluation.
    pub fn comparison(&self) -> StageResult<String> {
        self.require(EVAL_STAGE)?;
        std::fs::read_to_string(self.path("eval/comparison.csv"))
            .map_err(|e| failed(EVAL_STAGE)(Error::io(self.path("eval/comparison.csv"), e)))
    }

    pub fn report(&mut self) -> StageResult<(StageOutcome, String)> {
        let inputs = self.require(EVAL_STAGE)?;
        let csv = self.comparison()?;
        let (_, _, gold) = self.gold()?;
        let text = render_report(&csv, &gold);
        let outcome = self.stage(REPORT_STAGE, &"report", inputs, |x| {
            let p = x.path("report/report.txt");
            write_bytes(&p, text.as_bytes())?;
            Ok((vec![p], 0))
        })?;
        Ok((outcome, text))
    }
}

fn execute<F: ForwardModel + ?Sized>(
    spec: &MethodSpec,
    prior: &GaussianPrior,
    obs: &ObservationSet,
    forward: &F,
    seed: u64,
) -> crate::Result<RunResult> {
    match spec {
        MethodSpec::IrEnlm(p) => ir_enlm::run_ensemble(prior, obs, p, forward, seed),
        MethodSpec::IrEs(p) => ir_es::run(prior, obs, p, forward, seed),
        MethodSpec::Es(p) => standard_es(prior, obs, p.n_e, seed, forward),
        MethodSpec::Rml(p) => rml_ensemble(prior, obs, p, seed, forward),
    }
}

/// `J_RML/N_D` of every member of replication 0, against the member's own
/// perturbed data and initial draw. Stored predictions are reused; members
/// without one are re-simulated. Returns the values and the number of
/// forward calls spent.
fn member_misfits<F: ForwardModel + ?Sized>(
    x: &Experiment,
    run: &MethodRun,
    prior: &GaussianPrior,
    obs: &ObservationSet,
    forward: &F,
) -> crate::Result<(Vec<f64>, u64)> {
    let dir = x.path(&format!("runs/{}/{}/rep_000", run.method.name(), run.label));
    let n_e = run.spec.n_e();
    let seed = replication_seed(run.seed, 0);
    let members = read_members(&dir, n_e)?;
    let initial = initial_ensemble(prior, n_e, seed);
    let perturbed = perturb(obs, n_e, seed)?;
    let nd = obs.len() as f64;
    let mut calls = 0;
    let mut out = Vec::with_capacity(n_e);
    for j in 0..n_e {
        let pp = dir.join("predictions").join(format!("prediction_{j:04}.f64"));
        let g = if pp.exists() {
            DVector::from_vec(read_f64s(&pp)?)
        } else {
            calls += 1;
            forward.evaluate(&members[j])?
        };
        let jv = rml_objective_at(&g, &members[j], &initial[j], &perturbed.y[j], prior, &obs.gamma_diag)?;
        out.push(jv / nd);
    }
    Ok((out, calls))
}

fn render_report(csv: &str, gold: &McmcSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "reference posterior: {} chains x {} steps, beta {:.4}, max PSRF {}, {}\n\n",
        gold.n_chains,
        gold.chain_length,
        gold.beta,
        gold.max_psrf.map_or("n/a".to_string(), |p| format!("{p:.3}")),
        if gold.converged { "converged" } else { "NOT converged" }
    ));
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let ncol = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:>w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(path, json.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> crate::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Five-number summaries keyed by label, as written to
/// `eval/boxplot_misfit.csv`.
pub fn read_boxplot(path: &Path) -> crate::Result<Vec<(String, FiveNumber)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |k: usize| -> crate::Result<f64> {
                f.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad boxplot row: {l}")))
            };
            Ok((
                f[0].to_string(),
                FiveNumber {
                    min: num(1)?,
                    q1: num(2)?,
                    median: num(3)?,
                    q3: num(4)?,
                    max: num(5)?,
                },
            ))
        })
        .collect()
}

//! Results shared by the ensemble methods, initial ensembles, and the
//! on-disk layout of a finished run.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GaussianPrior;
use crate::io::{read_f64s, write_bytes, write_f64s};
use crate::rng::{substream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// The discrepancy principle was met.
    Discrepancy,
    /// The iteration cap was reached first.
    MaxIterations,
    /// Relative objective change and step size both fell below tolerance.
    Converged,
    /// The gradient vanished at the current iterate.
    Stationary,
    /// Repeated rejections pushed the LM damping past its guard.
    LambdaOverflow,
    /// A fixed number of analysis steps was requested and taken.
    FixedSteps,
    /// The forward model or a linear solve failed.
    Failed,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Discrepancy => "discrepancy",
            StopReason::MaxIterations => "max-iterations",
            StopReason::Converged => "converged",
            StopReason::Stationary => "stationary",
            StopReason::LambdaOverflow => "lambda-overflow",
            StopReason::FixedSteps => "fixed-steps",
            StopReason::Failed => "failed",
        }
    }
}

/// Per-member history of an iterative method.
///
/// For IR-enLM, entry `m` of `misfits` is `‖Γ^{-1/2}(y_j − G(u_m))‖` and
/// `alphas[m]`/`doublings[m]` belong to the step from `u_m` to `u_{m+1}`.
/// RML fills `lambdas`/`accepted` per attempted step and `objectives`,
/// `misfits` per accepted iterate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MemberTrace {
    pub member: usize,
    pub iterations: usize,
    pub misfits: Vec<f64>,
    pub alphas: Vec<f64>,
    pub doublings: Vec<usize>,
    /// Independent re-check of each selected `α`: it satisfies its
    /// inequality and, when `α > 1`, `α/2` does not.
    #[serde(default)]
    pub alpha_verified: Vec<bool>,
    pub lambdas: Vec<f64>,
    pub accepted: Vec<bool>,
    pub objectives: Vec<f64>,
    pub stop: Option<StopReason>,
    /// `τ η_j` for discrepancy-stopped methods.
    pub threshold: Option<f64>,
    /// Threshold applied to the initial member, `min(τ, 1)·η_j`: a member
    /// already inside the noise level is returned as is, any other takes at
    /// least one step.
    #[serde(default)]
    pub initial_threshold: Option<f64>,
    /// Whether `J ≤ N_D + 5√(2 N_D)` holds at exit (RML).
    pub objective_bound_met: Option<bool>,
    pub error: Option<String>,
}

impl MemberTrace {
    pub fn new(member: usize) -> Self {
        Self {
            member,
            ..Default::default()
        }
    }

    pub fn failed(&self) -> bool {
        self.stop == Some(StopReason::Failed)
    }
}

/// Per-iteration history of an ensemble smoother. Index `m` refers to the
/// ensemble after `m` analysis steps.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SmootherTrace {
    /// `‖Γ^{-1/2}(y − w̄_m)‖` for the predictions held at iterate `m`.
    pub mean_misfits: Vec<f64>,
    /// Whether the predictions at iterate `m` are fresh forward evaluations.
    pub refreshed: Vec<bool>,
    pub alphas: Vec<f64>,
    pub doublings: Vec<usize>,
    /// As [`MemberTrace::alpha_verified`]; empty when `α` is fixed.
    #[serde(default)]
    pub alpha_verified: Vec<bool>,
    pub threshold: f64,
    /// `min(τ, 1)·η`, applied to the initial ensemble.
    #[serde(default)]
    pub initial_threshold: Option<f64>,
    pub stop: Option<StopReason>,
    /// Mean misfit of the fresh evaluation of the returned ensemble.
    pub final_fresh_misfit: Option<f64>,
}

impl SmootherTrace {
    pub fn iterations(&self) -> usize {
        self.alphas.len()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: String,
    pub members: Vec<DVector<f64>>,
    /// `G` at each returned member, when it was evaluated.
    pub predictions: Vec<Option<DVector<f64>>>,
    pub member_traces: Vec<MemberTrace>,
    pub smoother: Option<SmootherTrace>,
    /// Forward evaluations used by the algorithm proper.
    pub forward_calls: u64,
    pub jacobian_calls: u64,
    /// Evaluations made only for reporting (not part of the method's cost).
    pub diagnostic_calls: u64,
}

impl RunResult {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn mean(&self) -> DVector<f64> {
        ensemble_mean(&self.members)
    }

    /// Per-component sample variance (`1/(N_e − 1)` normalization).
    pub fn variance(&self) -> DVector<f64> {
        ensemble_variance(&self.members)
    }

    /// Average iteration count: per member for member-wise methods, the
    /// number of analysis steps for smoothers.
    pub fn average_iterations(&self) -> f64 {
        if let Some(s) = &self.smoother {
            return s.iterations() as f64;
        }
        if self.member_traces.is_empty() {
            return 0.0;
        }
        self.member_traces.iter().map(|t| t.iterations as f64).sum::<f64>()
            / self.member_traces.len() as f64
    }

    pub fn failures(&self) -> Vec<(usize, String)> {
        self.member_traces
            .iter()
            .filter_map(|t| t.error.clone().map(|e| (t.member, e)))
            .collect()
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.method.clone(),
            n_members: self.n_members(),
            n_params: self.members.first().map_or(0, |m| m.len()),
            average_iterations: self.average_iterations(),
            forward_calls: self.forward_calls,
            jacobian_calls: self.jacobian_calls,
            diagnostic_calls: self.diagnostic_calls,
            failed_members: self.failures().len(),
            stop_reasons: self
                .member_traces
                .iter()
                .filter_map(|t| t.stop.map(|s| s.as_str().to_string()))
                .collect(),
            smoother_stop: self
                .smoother
                .as_ref()
                .and_then(|s| s.stop.map(|r| r.as_str().to_string())),
            objective_bound_fraction: objective_bound_fraction(&self.member_traces),
        }
    }
}

fn objective_bound_fraction(traces: &[MemberTrace]) -> Option<f64> {
    let flags: Vec<bool> = traces.iter().filter_map(|t| t.objective_bound_met).collect();
    (!flags.is_empty())
        .then(|| flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64)
}

/// Scalar facts about a run, stored next to the member binaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub n_members: usize,
    pub n_params: usize,
    pub average_iterations: f64,
    pub forward_calls: u64,
    pub jacobian_calls: u64,
    pub diagnostic_calls: u64,
    pub failed_members: usize,
    pub stop_reasons: Vec<String>,
    pub smoother_stop: Option<String>,
    pub objective_bound_fraction: Option<f64>,
}

/// Breaches of the discrepancy-principle contract in a finished run:
/// members (or the smoother) stopped by the discrepancy rule must meet
/// their threshold at output and have missed it at every earlier iterate
/// (the initial iterate is held to its own, possibly lower, threshold),
/// members stopped by the cap must never have met it, and every selected
/// `α` must have passed its independent re-check.
pub fn contract_violations(run: &RunResult) -> Vec<String> {
    fn check_sequence(
        who: &str,
        misfits: &[f64],
        threshold: f64,
        initial: Option<f64>,
        stop: Option<StopReason>,
        out: &mut Vec<String>,
    ) {
        let at = |k: usize| if k == 0 { initial.unwrap_or(threshold) } else { threshold };
        let Some((last, earlier)) = misfits.split_last() else {
            return;
        };
        if let Some(k) = (0..earlier.len()).find(|&k| earlier[k] <= at(k)) {
            out.push(format!("{who}: misfit {:.6e} <= {:.6e} already at iterate {k}", earlier[k], at(k)));
        }
        let t_last = at(earlier.len());
        match stop {
            Some(StopReason::Discrepancy) if *last > t_last => {
                out.push(format!("{who}: stopped with misfit {last:.6e} > {t_last:.6e}"))
            }
            Some(StopReason::MaxIterations) if *last <= t_last => {
                out.push(format!("{who}: flagged at the cap but misfit {last:.6e} <= {t_last:.6e}"))
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for t in &run.member_traces {
        let who = format!("member {}", t.member);
        if let Some(threshold) = t.threshold {
            check_sequence(&who, &t.misfits, threshold, t.initial_threshold, t.stop, &mut out);
        }
        if let Some(k) = t.alpha_verified.iter().position(|v| !v) {
            out.push(format!("{who}: alpha {} at iteration {k} failed its re-check", t.alphas[k]));
        }
    }
    if let Some(s) = &run.smoother {
        if s.stop != Some(StopReason::FixedSteps) {
            check_sequence("smoother", &s.mean_misfits, s.threshold, s.initial_threshold, s.stop, &mut out);
        }
        if let Some(k) = s.alpha_verified.iter().position(|v| !v) {
            out.push(format!("smoother: alpha {} at iteration {k} failed its re-check", s.alphas[k]));
        }
    }
    out
}

pub fn ensemble_mean(members: &[DVector<f64>]) -> DVector<f64> {
    let n = members.first().map_or(0, |m| m.len());
    let mut s = DVector::zeros(n);
    for m in members {
        s += m;
    }
    s / members.len().max(1) as f64
}

pub fn ensemble_variance(members: &[DVector<f64>]) -> DVector<f64> {
    let mean = ensemble_mean(members);
    let mut v = DVector::zeros(mean.len());
    for m in members {
        let d = m - &mean;
        v += d.component_mul(&d);
    }
    v / (members.len().max(2) - 1) as f64
}

/// `N_e` prior draws; member `j` uses substream `(seed, MEMBERS, j)`, so all
/// methods run from the same seed start from the same ensemble.
pub fn initial_ensemble(prior: &GaussianPrior, n_e: usize, seed: u64) -> Vec<DVector<f64>> {
    (0..n_e)
        .into_par_iter()
        .map(|j| prior.draw(&mut substream(seed, &[tag::MEMBERS, j as u64])))
        .collect()
}

/// Writes `members/member_NNNN.f64`, `predictions/prediction_NNNN.f64`,
/// `traces.csv` (member-wise methods), `smoother.csv` (smoothers) and
/// `summary.json`. Returns the written paths.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (j, m) in run.members.iter().enumerate() {
        let p = dir.join("members").join(format!("member_{j:04}.f64"));
        write_f64s(&p, m.as_slice())?;
        written.push(p);
    }
    for (j, g) in run.predictions.iter().enumerate() {
        if let Some(g) = g {
            let p = dir.join("predictions").join(format!("prediction_{j:04}.f64"));
            write_f64s(&p, g.as_slice())?;
            written.push(p);
        }
    }
    if !run.member_traces.is_empty() {
        let p = dir.join("traces.csv");
        write_bytes(&p, member_traces_csv(&run.member_traces).as_bytes())?;
        written.push(p);
    }
    if let Some(s) = &run.smoother {
        let p = dir.join("smoother.csv");
        write_bytes(&p, smoother_csv(s).as_bytes())?;
        written.push(p);
    }
    let p = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&run.summary())
        .map_err(|e| Error::Format(format!("summary: {e}")))?;
    write_bytes(&p, json.as_bytes())?;
    written.push(p);
    Ok(written)
}

/// Final members written by [`write_run`].
pub fn read_members(dir: &Path, n_members: usize) -> Result<Vec<DVector<f64>>> {
    (0..n_members)
        .map(|j| {
            let p = dir.join("members").join(format!("member_{j:04}.f64"));
            Ok(DVector::from_vec(read_f64s(&p)?))
        })
        .collect()
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let p = dir.join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

fn opt(v: Option<&f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

/// One row per member and iteration:
/// `member,iter,misfit,alpha,doublings,lambda,accepted,objective,stop`.
pub fn member_traces_csv(traces: &[MemberTrace]) -> String {
    let mut out = String::from("member,iter,misfit,alpha,doublings,lambda,accepted,objective,stop\n");
    for t in traces {
        let rows = t
            .misfits
            .len()
            .max(t.lambdas.len())
            .max(t.objectives.len())
            .max(1);
        for it in 0..rows {
            let stop = if it + 1 == rows {
                t.stop.map_or("", |s| s.as_str())
            } else {
                ""
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                t.member,
                it,
                opt(t.misfits.get(it)),
                opt(t.alphas.get(it)),
                t.doublings.get(it).map_or(String::new(), |d| d.to_string()),
                opt(t.lambdas.get(it)),
                t.accepted
                    .get(it)
                    .map_or(String::new(), |a| (*a as u8).to_string()),
                opt(t.objectives.get(it)),
                stop
            ));
        }
    }
    out
}

/// `iter,mean_misfit,refreshed,alpha,doublings`.
pub fn smoother_csv(s: &SmootherTrace) -> String {
    let mut out = String::from("iter,mean_misfit,refreshed,alpha,doublings\n");
    for (m, mis) in s.mean_misfits.iter().enumerate() {
        out.push_str(&format!(
            "{},{:e},{},{},{}\n",
            m,
            mis,
            s.refreshed.get(m).map_or(0, |r| *r as u8),
            opt(s.alphas.get(m)),
            s.doublings.get(m).map_or(String::new(), |d| d.to_string()),
        ));
    }
    out
}

//! Iterative regularizing ensemble smoother (IR-ES).
//!
//! All members are updated together from ensemble moments. The Tikhonov
//! weight `α` of each analysis step is the smallest power of two for which
//! the updated ensemble mean keeps a fraction `ρ` of the mean misfit, and
//! iteration stops once `‖Γ^{-1/2}(y − w̄)‖ ≤ τ η` with the unperturbed data.
//! Forward predictions are refreshed every `M_ES` steps; in between, the
//! analyzed predictions are carried forward.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_mean, initial_ensemble, RunResult, SmootherTrace, StopReason};
use crate::error::{ensure_len, Error, Result};
use crate::field::GaussianPrior;
use crate::forward::ForwardModel;
use crate::ir_enlm::{alpha_condition, doubling_search, AlphaChoice};
use crate::linalg::{add_scaled_diag, cholesky};
use crate::observations::{perturb, weighted_diag_norm, ObservationSet, PerturbedObservations};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrEsParams {
    pub rho: f64,
    pub tau: f64,
    pub n_e: usize,
    /// Refresh period `M_ES`.
    pub m_es: usize,
    pub max_outer: usize,
    pub max_alpha_doublings: usize,
    /// Use `1/(N_e − 1)` instead of `1/N_e` in the moments.
    pub unbiased_moments: bool,
}

impl Default for IrEsParams {
    fn default() -> Self {
        Self {
            rho: 0.8,
            tau: 1.25,
            n_e: 25,
            m_es: 10,
            max_outer: 60,
            max_alpha_doublings: 60,
            unbiased_moments: false,
        }
    }
}

impl IrEsParams {
    pub fn new(rho: f64, tau: f64, n_e: usize, m_es: usize) -> Self {
        Self {
            rho,
            tau,
            n_e,
            m_es,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidInput(format!("rho must lie in (0,1), got {}", self.rho)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidInput(format!("tau must be positive, got {}", self.tau)));
        }
        if self.n_e < 2 {
            return Err(Error::InvalidInput("ensemble smoothers need at least 2 members".into()));
        }
        if self.m_es == 0 || self.max_outer == 0 || self.max_alpha_doublings == 0 {
            return Err(Error::InvalidInput("m_es and iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Ensemble means and the cross/auto moment matrices
/// `C_uw = Σ (u_j − ū)(w_j − w̄)ᵀ / N`, `C_ww = Σ (w_j − w̄)(w_j − w̄)ᵀ / N`.
#[derive(Debug, Clone)]
pub struct EnsembleMoments {
    pub u_bar: DVector<f64>,
    pub w_bar: DVector<f64>,
    pub c_uw: DMatrix<f64>,
    pub c_ww: DMatrix<f64>,
}

/// Moments with `1/N_e` weights, or `1/(N_e − 1)` when `unbiased`.
pub fn ensemble_moments(
    members: &[DVector<f64>],
    predictions: &[DVector<f64>],
    unbiased: bool,
) -> Result<EnsembleMoments> {
    let ne = members.len();
    if ne < 2 {
        return Err(Error::InvalidInput("moments need at least 2 members".into()));
    }
    ensure_len("predictions", ne, predictions.len())?;
    let u_bar = ensemble_mean(members);
    let w_bar = ensemble_mean(predictions);
    let du = DMatrix::from_fn(u_bar.len(), ne, |i, j| members[j][i] - u_bar[i]);
    let dw = DMatrix::from_fn(w_bar.len(), ne, |i, j| predictions[j][i] - w_bar[i]);
    let norm = if unbiased { (ne - 1) as f64 } else { ne as f64 };
    let c_uw = &du * dw.transpose() / norm;
    let c_ww = &dw * dw.transpose() / norm;
    Ok(EnsembleMoments { u_bar, w_bar, c_uw, c_ww })
}

/// Sample covariance of `members` with the same normalization rule.
pub fn ensemble_covariance(members: &[DVector<f64>], unbiased: bool) -> DMatrix<f64> {
    let ne = members.len();
    let u_bar = ensemble_mean(members);
    let du = DMatrix::from_fn(u_bar.len(), ne, |i, j| members[j][i] - u_bar[i]);
    let norm = if unbiased { (ne.max(2) - 1) as f64 } else { ne.max(1) as f64 };
    &du * du.transpose() / norm
}

/// `α‖Γ^{1/2}(C_ww + αΓ)⁻¹(y − w̄)‖ ≥ ρ‖Γ^{-1/2}(y − w̄)‖`.
pub fn es_alpha_condition(
    w_bar: &DVector<f64>,
    y: &DVector<f64>,
    gamma: &DVector<f64>,
    c_ww: &DMatrix<f64>,
    rho: f64,
    alpha: f64,
) -> Result<bool> {
    ensure_len("data", w_bar.len(), y.len())?;
    alpha_condition(&(y - w_bar), c_ww, gamma, rho, alpha)
}

pub fn select_alpha_es(
    w_bar: &DVector<f64>,
    y: &DVector<f64>,
    gamma: &DVector<f64>,
    c_ww: &DMatrix<f64>,
    rho: f64,
    max_doublings: usize,
) -> Result<AlphaChoice> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidInput(format!("rho must lie in (0,1), got {rho}")));
    }
    let r = y - w_bar;
    doubling_search(max_doublings, |a| alpha_condition(&r, c_ww, gamma, rho, a))
}

/// `u_j ← u_j + C_uw d_j`, `w_j ← w_j + C_ww d_j` with
/// `d_j = (C_ww + αΓ)⁻¹(y_j − w_j)` from one shared factorization.
pub fn analysis_update(
    members: &[DVector<f64>],
    predictions: &[DVector<f64>],
    y_perturbed: &[DVector<f64>],
    moments: &EnsembleMoments,
    gamma: &DVector<f64>,
    alpha: f64,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    let ne = members.len();
    ensure_len("predictions", ne, predictions.len())?;
    ensure_len("perturbed data sets", ne, y_perturbed.len())?;
    let nd = moments.w_bar.len();
    let m = add_scaled_diag(&moments.c_ww, alpha, gamma);
    let ch = cholesky(&m).ok_or_else(|| {
        Error::Factorization(format!("C_ww + αΓ not positive definite at α = {alpha:e}"))
    })?;
    let mut innov = DMatrix::zeros(nd, ne);
    for j in 0..ne {
        ensure_len("perturbed data", nd, y_perturbed[j].len())?;
        innov.set_column(j, &(&y_perturbed[j] - &predictions[j]));
    }
    let d = ch.solve(&innov);
    let du = &moments.c_uw * &d;
    let dw = &moments.c_ww * &d;
    let new_u = (0..ne).map(|j| &members[j] + du.column(j)).collect();
    let new_w = (0..ne).map(|j| &predictions[j] + dw.column(j)).collect();
    Ok((new_u, new_w))
}

/// Overrides used to express the standard smoother as a special case.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SmootherOptions {
    /// Use this `α` in every analysis step instead of searching.
    pub fixed_alpha: Option<f64>,
    /// Take exactly this many analysis steps, ignoring the stopping rule.
    pub fixed_steps: Option<usize>,
}

fn evaluate_all<F: ForwardModel + ?Sized>(
    forward: &F,
    members: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    members
        .par_iter()
        .enumerate()
        .map(|(j, u)| {
            forward.evaluate(u).inspect_err(|e| {
                log::error!("forward evaluation of member {j} failed: {e}");
            })
        })
        .collect()
}

fn mean_misfit(y: &DVector<f64>, predictions: &[DVector<f64>], gamma: &DVector<f64>) -> f64 {
    weighted_diag_norm(&(y - ensemble_mean(predictions)), gamma)
}

/// Runs the smoother from a given initial ensemble and perturbed data.
pub fn run_from<F: ForwardModel + ?Sized>(
    initial: &[DVector<f64>],
    perturbed: &PerturbedObservations,
    obs: &ObservationSet,
    params: &IrEsParams,
    options: SmootherOptions,
    forward: &F,
) -> Result<RunResult> {
    params.validate()?;
    ensure_len("initial ensemble", params.n_e, initial.len())?;
    ensure_len("perturbed data sets", params.n_e, perturbed.len())?;
    let ne = params.n_e as u64;
    let gamma = &obs.gamma_diag;
    let threshold = params.tau * obs.eta;
    let initial_threshold = threshold.min(obs.eta);
    let mut trace = SmootherTrace {
        threshold,
        initial_threshold: Some(initial_threshold),
        ..Default::default()
    };
    let mut members = initial.to_vec();
    let mut forward_calls = ne;
    let mut predictions = evaluate_all(forward, &members)?;
    let mut fresh = true;
    let mut m = 0usize;
    loop {
        let misfit = mean_misfit(&obs.y, &predictions, gamma);
        trace.mean_misfits.push(misfit);
        trace.refreshed.push(fresh);
        match options.fixed_steps {
            Some(k) if m == k => {
                trace.stop = Some(StopReason::FixedSteps);
                break;
            }
            Some(_) => {}
            None => {
                if misfit <= if m == 0 { initial_threshold } else { threshold } {
                    trace.stop = Some(StopReason::Discrepancy);
                    break;
                }
                if m == params.max_outer {
                    log::warn!(
                        "smoother reached {} iterations with mean misfit {misfit:.4e} > {threshold:.4e}",
                        params.max_outer
                    );
                    trace.stop = Some(StopReason::MaxIterations);
                    break;
                }
            }
        }
        let moments = ensemble_moments(&members, &predictions, params.unbiased_moments)?;
        let choice = match options.fixed_alpha {
            Some(alpha) => AlphaChoice { alpha, doublings: 0 },
            None => {
                let choice = select_alpha_es(
                    &moments.w_bar,
                    &obs.y,
                    gamma,
                    &moments.c_ww,
                    params.rho,
                    params.max_alpha_doublings,
                )?;
                let check = |a| es_alpha_condition(&moments.w_bar, &obs.y, gamma, &moments.c_ww, params.rho, a);
                let verified = check(choice.alpha)? && (choice.alpha == 1.0 || !check(0.5 * choice.alpha)?);
                trace.alpha_verified.push(verified);
                choice
            }
        };
        let (u_new, w_new) =
            analysis_update(&members, &predictions, &perturbed.y, &moments, gamma, choice.alpha)?;
        trace.alphas.push(choice.alpha);
        trace.doublings.push(choice.doublings);
        members = u_new;
        m += 1;
        if m % params.m_es == 0 {
            forward_calls += ne;
            predictions = evaluate_all(forward, &members)?;
            fresh = true;
        } else {
            predictions = w_new;
            fresh = false;
        }
    }
    let mut diagnostic_calls = 0;
    if !fresh {
        diagnostic_calls = ne;
        predictions = evaluate_all(forward, &members)?;
    }
    trace.final_fresh_misfit = Some(mean_misfit(&obs.y, &predictions, gamma));
    Ok(RunResult {
        method: "ir-es".into(),
        members,
        predictions: predictions.into_iter().map(Some).collect(),
        member_traces: Vec::new(),
        smoother: Some(trace),
        forward_calls,
        jacobian_calls: 0,
        diagnostic_calls,
    })
}

/// Draws the initial ensemble and perturbations from `seed` and runs IR-ES.
pub fn run<F: ForwardModel + ?Sized>(
    prior: &GaussianPrior,
    obs: &ObservationSet,
    params: &IrEsParams,
    forward: &F,
    seed: u64,
) -> Result<RunResult> {
    params.validate()?;
    let initial = initial_ensemble(prior, params.n_e, seed);
    let perturbed = perturb(obs, params.n_e, seed)?;
    run_from(&initial, &perturbed, obs, params, SmootherOptions::default(), forward)
}

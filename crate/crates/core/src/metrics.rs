//! Scoring ensembles against reference posterior moments, the parameter
//! bounds under which the linear-case equivalences hold, and the summary
//! statistics behind comparison tables and boxplots.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{objective_bound, rml_objective};
use crate::error::{ensure_len, Error, Result};
use crate::field::GaussianPrior;
use crate::forward::ForwardModel;
use crate::linalg::{diag_sandwich, sym_extreme_eigenvalues};
use crate::observations::{weighted_diag_norm, PerturbedObservations};

/// Discrete `L²(D)` norm on a uniform grid: `√(dx·dy · Σ vᵢ²)`.
pub fn l2_norm(v: &DVector<f64>, cell_area: f64) -> f64 {
    (cell_area * v.norm_squared()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub eps_u: f64,
    pub eps_sigma: f64,
}

/// `ε_u = ‖(û − ū) − (u_pos − ū)‖ / ‖u_pos − ū‖` and
/// `ε_σ = ‖σ̂ − σ_pos‖ / ‖σ_pos‖`, with `σ` the per-cell variance.
pub fn relative_errors(
    ensemble_mean: &DVector<f64>,
    ensemble_var: &DVector<f64>,
    posterior_mean: &DVector<f64>,
    posterior_var: &DVector<f64>,
    prior_mean: &DVector<f64>,
    cell_area: f64,
) -> Result<RelativeErrors> {
    let n = posterior_mean.len();
    ensure_len("ensemble mean", n, ensemble_mean.len())?;
    ensure_len("ensemble variance", n, ensemble_var.len())?;
    ensure_len("posterior variance", n, posterior_var.len())?;
    ensure_len("prior mean", n, prior_mean.len())?;
    let centered_pos = posterior_mean - prior_mean;
    let den_u = l2_norm(&centered_pos, cell_area);
    let den_s = l2_norm(posterior_var, cell_area);
    if !(den_u > 0.0) || !(den_s > 0.0) {
        return Err(Error::Degenerate(
            "posterior mean equals the prior mean or posterior variance vanishes".into(),
        ));
    }
    let num_u = l2_norm(&((ensemble_mean - prior_mean) - centered_pos), cell_area);
    let num_s = l2_norm(&(ensemble_var - posterior_var), cell_area);
    Ok(RelativeErrors {
        eps_u: num_u / den_u,
        eps_sigma: num_s / den_s,
    })
}

/// `J_RML(u)/N_D` for one member.
pub fn normalized_misfit<F: ForwardModel + ?Sized>(
    member: &DVector<f64>,
    y_j: &DVector<f64>,
    u0_j: &DVector<f64>,
    prior: &GaussianPrior,
    gamma: &DVector<f64>,
    forward: &F,
) -> Result<f64> {
    Ok(rml_objective(member, u0_j, y_j, prior, gamma, forward)? / y_j.len() as f64)
}

/// `(N_D + 5√(2N_D))/N_D`, the normalized acceptance level for the RML
/// objective.
pub fn normalized_objective_threshold(n_data: usize) -> f64 {
    objective_bound(n_data) / n_data as f64
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile `p` of sorted data, interpolating between order statistics at
/// position `p·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn five_number(values: &[f64]) -> Result<FiveNumber> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("five-number summary needs non-NaN data".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(FiveNumber {
        min: s[0],
        q1: quantile_sorted(&s, 0.25),
        median: quantile_sorted(&s, 0.5),
        q3: quantile_sorted(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// Extreme eigenvalues of `S = Γ^{-1/2}(A C Aᵀ + Γ)Γ^{-1/2}`.
/// `‖(ACAᵀ+Γ)^{1/2}Γ^{-1/2}‖² = λ_max(S)` and
/// `‖(ACAᵀ+Γ)^{-1/2}Γ^{1/2}‖² = 1/λ_min(S)`.
pub fn whitened_data_spectrum(a: &DMatrix<f64>, c: &DMatrix<f64>, gamma: &DVector<f64>) -> Result<(f64, f64)> {
    ensure_len("forward matrix rows", gamma.len(), a.nrows())?;
    ensure_len("covariance", a.ncols(), c.nrows())?;
    let s_inv = gamma.map(|g| 1.0 / g.sqrt());
    let mut s = diag_sandwich(&(a * c * a.transpose()), &s_inv);
    for i in 0..s.nrows() {
        s[(i, i)] += 1.0;
    }
    let (max, min) = sym_extreme_eigenvalues(&s);
    if !(min > 0.0) {
        return Err(Error::Degenerate("whitened data covariance is not positive definite".into()));
    }
    Ok((max, min))
}

/// Parameter bounds guaranteeing a single iteration with `α = 1` in the
/// linear case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBounds {
    /// `ρ` must lie strictly below this.
    pub rho_max: f64,
    /// `‖(ACAᵀ+Γ)^{-1/2}Γ^{1/2}‖²`.
    pub inverse_norm: f64,
    /// Initial misfit divided by the stopping noise level.
    pub misfit_ratio: f64,
    /// Whether the initial misfit exceeds the noise level (per member for
    /// IR-enLM, a single entry for IR-ES). Violations are reported, not fatal.
    pub precondition: Vec<bool>,
}

impl LinearBounds {
    /// `τ` must lie strictly above this.
    pub fn tau_min(&self, rho: f64) -> f64 {
        self.inverse_norm.max(1.0 / rho) * self.misfit_ratio
    }

    pub fn precondition_holds(&self) -> bool {
        self.precondition.iter().all(|b| *b)
    }
}

/// Bounds for IR-enLM on `G(u) = A u` with members `u0` and perturbed data.
pub fn prop1_bounds(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    gamma: &DVector<f64>,
    u0: &[DVector<f64>],
    perturbed: &PerturbedObservations,
    eta: f64,
) -> Result<LinearBounds> {
    ensure_len("perturbed data", u0.len(), perturbed.len())?;
    if u0.is_empty() {
        return Err(Error::InvalidInput("need at least one member".into()));
    }
    let (max, min) = whitened_data_spectrum(a, c, gamma)?;
    let misfits: Vec<f64> = u0
        .iter()
        .zip(&perturbed.y)
        .map(|(u, y)| weighted_diag_norm(&(y - a * u), gamma))
        .collect();
    let xi: Vec<f64> = perturbed.xi.iter().map(|x| weighted_diag_norm(x, gamma)).collect();
    let precondition = misfits
        .iter()
        .zip(&xi)
        .map(|(m, x)| *m > eta + 0.5 * x)
        .collect();
    let max_misfit = misfits.iter().cloned().fold(0.0, f64::max);
    let min_xi = xi.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(LinearBounds {
        rho_max: 1.0 / max,
        inverse_norm: 1.0 / min,
        misfit_ratio: max_misfit / (eta + 0.5 * min_xi),
        precondition,
    })
}

/// Bounds for IR-ES on `G(u) = A u` with ensemble covariance `c0` and mean
/// `u_bar0`.
pub fn prop2_bounds(
    a: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    gamma: &DVector<f64>,
    u_bar0: &DVector<f64>,
    y: &DVector<f64>,
    eta: f64,
) -> Result<LinearBounds> {
    if !(eta > 0.0) {
        return Err(Error::InvalidInput("noise level must be positive".into()));
    }
    let (max, min) = whitened_data_spectrum(a, c0, gamma)?;
    let misfit = weighted_diag_norm(&(y - a * u_bar0), gamma);
    Ok(LinearBounds {
        rho_max: 1.0 / max,
        inverse_norm: 1.0 / min,
        misfit_ratio: misfit / eta,
        precondition: vec![misfit > eta],
    })
}

/// One row of a method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub method: String,
    pub rho: Option<f64>,
    pub tau: Option<f64>,
    pub n_e: usize,
    pub m_es: Option<usize>,
    pub eps_u: f64,
    pub eps_sigma: f64,
    pub avg_iterations: f64,
    pub forward_calls: u64,
    pub misfit_summary: Option<FiveNumber>,
}

pub const COMPARISON_HEADER: &str = "method,rho,tau,n_e,m_es,eps_u,eps_sigma,avg_iterations,forward_calls";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn comparison_csv(rows: &[ComparisonReport]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.3},{}\n",
            r.method,
            opt(r.rho),
            opt(r.tau),
            r.n_e,
            opt(r.m_es),
            r.eps_u,
            r.eps_sigma,
            r.avg_iterations,
            r.forward_calls
        ));
    }
    out
}

pub const BOXPLOT_HEADER: &str = "label,min,q1,median,q3,max";

pub fn boxplot_csv(rows: &[(String, FiveNumber)]) -> String {
    let mut out = format!("{BOXPLOT_HEADER}\n");
    for (label, f) in rows {
        out.push_str(&format!(
            "{label},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            f.min, f.q1, f.median, f.q3, f.max
        ));
    }
    out
}

//! Iteratively regularized ensemble Levenberg–Marquardt (IR-enLM).
//!
//! Every member minimizes its own randomized misfit with the regularizing
//! LM scheme: the step size `α` is the smallest power of two whose
//! linearized residual keeps a fraction `ρ` of the current residual, and the
//! iteration stops by the discrepancy principle `‖Γ^{-1/2}(y_j − G(u))‖ ≤ τ η_j`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{initial_ensemble, MemberTrace, RunResult, StopReason};
use crate::error::{ensure_len, Error, Result};
use crate::field::GaussianPrior;
use crate::forward::ForwardModel;
use crate::linalg::{add_scaled_diag, cholesky};
use crate::observations::{perturb, weighted_diag_norm, ObservationSet, PerturbedObservations};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrEnlmParams {
    pub rho: f64,
    pub tau: f64,
    pub n_e: usize,
    pub max_outer: usize,
    pub max_alpha_doublings: usize,
}

impl Default for IrEnlmParams {
    fn default() -> Self {
        Self {
            rho: 0.8,
            tau: 1.0,
            n_e: 25,
            max_outer: 50,
            max_alpha_doublings: 60,
        }
    }
}

impl IrEnlmParams {
    pub fn new(rho: f64, tau: f64, n_e: usize) -> Self {
        Self {
            rho,
            tau,
            n_e,
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
        if self.n_e == 0 || self.max_outer == 0 || self.max_alpha_doublings == 0 {
            return Err(Error::InvalidInput(
                "ensemble size and iteration caps must be at least 1".into(),
            ));
        }
        // τ = 1/ρ itself is the usual practical choice; warn only below it.
        if self.tau * self.rho < 1.0 - 1e-12 {
            log::warn!(
                "tau = {} < 1/rho = {:.4}: outside the range covered by the convergence theory",
                self.tau,
                1.0 / self.rho
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaChoice {
    pub alpha: f64,
    /// `n` in `α = 2ⁿ`.
    pub doublings: usize,
}

/// The data-space operators of one LM step at a fixed iterate:
/// `C DGᵀ` and `K = DG C DGᵀ`.
#[derive(Debug, Clone)]
pub struct LmSystem {
    cdgt: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl LmSystem {
    pub fn new(dg: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self> {
        if c.nrows() != c.ncols() || dg.ncols() != c.nrows() {
            return Err(Error::DimensionMismatch {
                context: "Jacobian columns vs prior covariance",
                expected: c.nrows(),
                actual: dg.ncols(),
            });
        }
        let cdgt = c * dg.transpose();
        let mut k = dg * &cdgt;
        // symmetrize against roundoff so the Cholesky sees an exact mirror
        k = 0.5 * (&k + k.transpose());
        Ok(Self { cdgt, k })
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// `C DGᵀ (K + αΓ)⁻¹ r`.
    pub fn increment(&self, r: &DVector<f64>, gamma: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
        let x = solve_shifted(&self.k, gamma, alpha, r)?;
        Ok(&self.cdgt * x)
    }

    pub fn alpha_condition(
        &self,
        r: &DVector<f64>,
        gamma: &DVector<f64>,
        rho: f64,
        alpha: f64,
    ) -> Result<bool> {
        alpha_condition(r, &self.k, gamma, rho, alpha)
    }

    pub fn select_alpha(
        &self,
        r: &DVector<f64>,
        gamma: &DVector<f64>,
        rho: f64,
        max_doublings: usize,
    ) -> Result<AlphaChoice> {
        doubling_search(max_doublings, |a| alpha_condition(r, &self.k, gamma, rho, a))
    }
}

/// `(K + αΓ)⁻¹ r` by Cholesky.
pub(crate) fn solve_shifted(
    k: &DMatrix<f64>,
    gamma: &DVector<f64>,
    alpha: f64,
    r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = add_scaled_diag(k, alpha, gamma);
    let ch = cholesky(&m).ok_or_else(|| {
        Error::Factorization(format!("K + αΓ not positive definite at α = {alpha:e}"))
    })?;
    Ok(ch.solve(r))
}

/// `ρ²‖Γ^{-1/2}r‖² ≤ α²‖Γ^{1/2}(K + αΓ)⁻¹r‖²`. A failed factorization
/// counts as a violation, so the search moves on to a larger `α`.
pub fn alpha_condition(
    r: &DVector<f64>,
    k: &DMatrix<f64>,
    gamma: &DVector<f64>,
    rho: f64,
    alpha: f64,
) -> Result<bool> {
    ensure_len("residual", k.nrows(), r.len())?;
    ensure_len("noise variances", k.nrows(), gamma.len())?;
    let lhs = rho * rho * r.iter().zip(gamma.iter()).map(|(a, g)| a * a / g).sum::<f64>();
    let x = match solve_shifted(k, gamma, alpha, r) {
        Ok(x) => x,
        Err(Error::Factorization(_)) => return Ok(false),
        Err(e) => return Err(e),
    };
    let rhs = alpha * alpha * x.iter().zip(gamma.iter()).map(|(a, g)| a * a * g).sum::<f64>();
    Ok(lhs <= rhs)
}

/// Smallest `α ∈ {2⁰, 2¹, …, 2^cap}` accepted by `ok`, tested in order.
pub(crate) fn doubling_search(
    max_doublings: usize,
    mut ok: impl FnMut(f64) -> Result<bool>,
) -> Result<AlphaChoice> {
    let mut alpha = 1.0;
    for n in 0..=max_doublings {
        if ok(alpha)? {
            return Ok(AlphaChoice { alpha, doublings: n });
        }
        alpha *= 2.0;
    }
    Err(Error::AlphaSearchExhausted(max_doublings))
}

/// `Δu = C DGᵀ (DG C DGᵀ + αΓ)⁻¹ (y_j − G(u_m))`.
pub fn lm_increment(
    y_j: &DVector<f64>,
    g_val: &DVector<f64>,
    dg: &DMatrix<f64>,
    c: &DMatrix<f64>,
    gamma: &DVector<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    ensure_len("perturbed data", dg.nrows(), y_j.len())?;
    ensure_len("prediction", dg.nrows(), g_val.len())?;
    LmSystem::new(dg, c)?.increment(&(y_j - g_val), gamma, alpha)
}

/// Smallest admissible `α` for residual `r = y_j − G(u_m)`.
pub fn select_alpha(
    r: &DVector<f64>,
    dg: &DMatrix<f64>,
    c: &DMatrix<f64>,
    gamma: &DVector<f64>,
    rho: f64,
    max_doublings: usize,
) -> Result<AlphaChoice> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidInput(format!("rho must lie in (0,1), got {rho}")));
    }
    LmSystem::new(dg, c)?.select_alpha(r, gamma, rho, max_doublings)
}

#[derive(Debug, Clone)]
pub struct MemberOutcome {
    pub u: DVector<f64>,
    /// `G(u)` at the returned iterate, if it was evaluated.
    pub prediction: Option<DVector<f64>>,
    pub trace: MemberTrace,
    pub forward_calls: u64,
    pub jacobian_calls: u64,
}

/// Runs one member from `u0` against its perturbed data `y_j`.
///
/// Failures (simulator errors, an exhausted `α` search) end the member early;
/// the last iterate is returned and the error is kept in the trace.
#[allow(clippy::too_many_arguments)]
pub fn run_member<F: ForwardModel + ?Sized>(
    member: usize,
    u0: &DVector<f64>,
    y_j: &DVector<f64>,
    eta_j: f64,
    params: &IrEnlmParams,
    c: &DMatrix<f64>,
    gamma: &DVector<f64>,
    forward: &F,
) -> MemberOutcome {
    let mut out = MemberOutcome {
        u: u0.clone(),
        prediction: None,
        trace: MemberTrace::new(member),
        forward_calls: 0,
        jacobian_calls: 0,
    };
    let threshold = params.tau * eta_j;
    out.trace.threshold = Some(threshold);
    out.trace.initial_threshold = Some(threshold.min(eta_j));
    if let Err(e) = iterate_member(&mut out, y_j, threshold, params, c, gamma, forward) {
        out.trace.stop = Some(StopReason::Failed);
        out.trace.error = Some(e.to_string());
    }
    out
}

fn iterate_member<F: ForwardModel + ?Sized>(
    out: &mut MemberOutcome,
    y_j: &DVector<f64>,
    threshold: f64,
    params: &IrEnlmParams,
    c: &DMatrix<f64>,
    gamma: &DVector<f64>,
    forward: &F,
) -> Result<()> {
    ensure_len("perturbed data", forward.n_data(), y_j.len())?;
    ensure_len("initial member", forward.n_params(), out.u.len())?;
    loop {
        out.prediction = None;
        out.forward_calls += 1;
        let g = forward.evaluate(&out.u)?;
        let r = y_j - &g;
        let misfit = weighted_diag_norm(&r, gamma);
        out.trace.misfits.push(misfit);
        out.prediction = Some(g);
        let bound = if out.trace.iterations == 0 {
            out.trace.initial_threshold.unwrap_or(threshold)
        } else {
            threshold
        };
        if misfit <= bound {
            out.trace.stop = Some(StopReason::Discrepancy);
            return Ok(());
        }
        if out.trace.iterations == params.max_outer {
            log::warn!(
                "member {} reached {} iterations with misfit {:.4e} > {:.4e}; kept",
                out.trace.member,
                params.max_outer,
                misfit,
                threshold
            );
            out.trace.stop = Some(StopReason::MaxIterations);
            return Ok(());
        }
        out.jacobian_calls += 1;
        let dg = forward.jacobian(&out.u)?;
        let sys = LmSystem::new(&dg, c)?;
        let choice = sys.select_alpha(&r, gamma, params.rho, params.max_alpha_doublings)?;
        let du = sys.increment(&r, gamma, choice.alpha)?;
        let verified = sys.alpha_condition(&r, gamma, params.rho, choice.alpha)?
            && (choice.alpha == 1.0 || !sys.alpha_condition(&r, gamma, params.rho, 0.5 * choice.alpha)?);
        out.trace.alpha_verified.push(verified);
        out.trace.alphas.push(choice.alpha);
        out.trace.doublings.push(choice.doublings);
        out.u += du;
        out.trace.iterations += 1;
    }
}

/// Runs all members of a given initial ensemble in parallel.
pub fn run_members<F: ForwardModel + ?Sized>(
    initial: &[DVector<f64>],
    perturbed: &PerturbedObservations,
    gamma: &DVector<f64>,
    c: &DMatrix<f64>,
    params: &IrEnlmParams,
    forward: &F,
) -> Result<RunResult> {
    params.validate()?;
    ensure_len("perturbed data sets", initial.len(), perturbed.len())?;
    let outcomes: Vec<MemberOutcome> = (0..initial.len())
        .into_par_iter()
        .map(|j| {
            run_member(
                j,
                &initial[j],
                &perturbed.y[j],
                perturbed.eta[j],
                params,
                c,
                gamma,
                forward,
            )
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.trace.failed()).count();
    if failed > 0 {
        log::warn!("{failed} of {} members failed", outcomes.len());
    }
    let mut run = RunResult {
        method: "ir-enlm".into(),
        members: Vec::with_capacity(outcomes.len()),
        predictions: Vec::with_capacity(outcomes.len()),
        member_traces: Vec::with_capacity(outcomes.len()),
        smoother: None,
        forward_calls: 0,
        jacobian_calls: 0,
        diagnostic_calls: 0,
    };
    for o in outcomes {
        run.forward_calls += o.forward_calls;
        run.jacobian_calls += o.jacobian_calls;
        run.members.push(o.u);
        run.predictions.push(o.prediction);
        run.member_traces.push(o.trace);
    }
    Ok(run)
}

/// Draws the initial ensemble and the data perturbations from `seed` and
/// runs every member.
pub fn run_ensemble<F: ForwardModel + ?Sized>(
    prior: &GaussianPrior,
    obs: &ObservationSet,
    params: &IrEnlmParams,
    forward: &F,
    seed: u64,
) -> Result<RunResult> {
    params.validate()?;
    let initial = initial_ensemble(prior, params.n_e, seed);
    let perturbed = perturb(obs, params.n_e, seed)?;
    run_members(&initial, &perturbed, &obs.gamma_diag, &prior.covariance, params, forward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::LinearForward;
    use crate::observations::perturb_with;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn s(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }
    fn m(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_increment() {
        let du = lm_increment(&s(3.0), &s(1.0), &m(1.0), &m(1.0), &s(1.0), 1.0).unwrap();
        assert_relative_eq!(du[0], 1.0, epsilon = 1e-15);
        let zero = lm_increment(&s(2.0), &s(2.0), &m(1.0), &m(1.0), &s(1.0), 1.0).unwrap();
        assert_eq!(zero[0], 0.0);
        let flat = lm_increment(&s(3.0), &s(1.0), &m(0.0), &m(1.0), &s(1.0), 1.0).unwrap();
        assert_eq!(flat[0], 0.0);
        assert!(lm_increment(&s(3.0), &s(1.0), &m(1.0), &m(1.0), &s(1.0), 0.0).is_err());
    }

    #[test]
    fn scalar_alpha_selection() {
        let a = select_alpha(&s(1.0), &m(1.0), &m(1.0), &s(1.0), 0.4, 60).unwrap();
        assert_eq!((a.alpha, a.doublings), (1.0, 0));
        let a = select_alpha(&s(1.0), &m(1.0), &m(1.0), &s(1.0), 0.6, 60).unwrap();
        assert_eq!((a.alpha, a.doublings), (2.0, 1));
        let a = select_alpha(&s(1.0), &m(0.0), &m(1.0), &s(1.0), 0.99, 60).unwrap();
        assert_eq!((a.alpha, a.doublings), (1.0, 0));
    }

    #[test]
    fn alpha_cap_reported() {
        // α/(s+α) ≥ ρ needs α of order 1e48 here
        let rho = 1.0 - 1e-12;
        let e = select_alpha(&s(1.0), &m(1e18), &m(1.0), &s(1.0), rho, 5).unwrap_err();
        assert!(matches!(e, Error::AlphaSearchExhausted(5)));
    }

    proptest! {
        #[test]
        fn scalar_alpha_matches_closed_form(sv in 0.0f64..1e3, rho in 0.01f64..0.99) {
            // scalar: α/(s+α) ≥ ρ  ⇔  α ≥ ρ s /(1−ρ)
            let a = select_alpha(&s(1.7), &m(sv.sqrt()), &m(1.0), &s(1.0), rho, 60).unwrap();
            let need = rho * sv / (1.0 - rho);
            prop_assert!(a.alpha >= need * (1.0 - 1e-12));
            if a.alpha > 1.0 {
                prop_assert!(a.alpha / 2.0 < need * (1.0 + 1e-12));
            }
            prop_assert_eq!(a.alpha, 2f64.powi(a.doublings as i32));
        }

        #[test]
        fn search_is_minimal(seed in 0u64..200) {
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x
            });
            let dg = g(4, 6) * 5.0;
            let b = g(6, 6);
            let c = &b * b.transpose() + DMatrix::identity(6, 6);
            let r = g(4, 1).column(0).into_owned();
            let gamma = DVector::from_element(4, 0.3);
            let a = select_alpha(&r, &dg, &c, &gamma, 0.7, 60).unwrap();
            let k = &dg * &c * dg.transpose();
            prop_assert!(alpha_condition(&r, &k, &gamma, 0.7, a.alpha).unwrap());
            for n in 0..a.doublings {
                prop_assert!(!alpha_condition(&r, &k, &gamma, 0.7, 2f64.powi(n as i32)).unwrap());
            }
        }
    }

    fn linear_fixture() -> (LinearForward, DMatrix<f64>, DVector<f64>, ObservationSet) {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, -0.3]);
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 1.0]);
        let gamma = DVector::from_vec(vec![0.1, 0.2]);
        let obs = ObservationSet::new(
            DVector::from_vec(vec![0.4, -0.2]),
            gamma.clone(),
            2f64.sqrt(),
            crate::observations::MeasurementLayout::generic(2),
        )
        .unwrap();
        (LinearForward::new(a).unwrap(), c, gamma, obs)
    }

    #[test]
    fn member_already_within_discrepancy() {
        let (g, c, gamma, _) = linear_fixture();
        let u0 = DVector::zeros(3);
        let p = IrEnlmParams::new(0.5, 2.5, 1);
        let o = run_member(0, &u0, &g.evaluate(&u0).unwrap(), 0.1, &p, &c, &gamma, &g);
        assert_eq!(o.trace.iterations, 0);
        assert_eq!(o.trace.misfits.len(), 1);
        assert_eq!(o.u, u0);
        assert_eq!(o.trace.stop, Some(StopReason::Discrepancy));
        assert_eq!((o.forward_calls, o.jacobian_calls), (1, 0));
    }

    #[test]
    fn member_between_noise_level_and_threshold_takes_one_step() {
        let (g, c, gamma, _) = linear_fixture();
        let u0 = DVector::zeros(3);
        let mut y = g.evaluate(&u0).unwrap();
        y[0] += 0.3 * gamma[0].sqrt();
        // misfit 0.3: above η_j = 0.2, below τ η_j = 0.5
        let p = IrEnlmParams::new(0.5, 2.5, 1);
        let o = run_member(0, &u0, &y, 0.2, &p, &c, &gamma, &g);
        assert_eq!(o.trace.iterations, 1);
        assert_eq!(o.trace.stop, Some(StopReason::Discrepancy));
        assert_ne!(o.u, u0);
    }

    #[test]
    fn cap_keeps_member_and_flags_it() {
        let (g, c, gamma, _) = linear_fixture();
        let u0 = DVector::zeros(3);
        let y = DVector::from_vec(vec![30.0, -20.0]);
        let p = IrEnlmParams {
            max_outer: 2,
            ..IrEnlmParams::new(0.9, 1.2, 1)
        };
        // an unreachable threshold forces the cap
        let o = run_member(0, &u0, &y, 0.0, &p, &c, &gamma, &g);
        assert_eq!(o.trace.stop, Some(StopReason::MaxIterations));
        assert_eq!(o.trace.iterations, 2);
        assert_eq!(o.trace.misfits.len(), 3);
        assert!(o.trace.misfits[2] < o.trace.misfits[0]);
    }

    #[test]
    fn single_member_ensemble_matches_member_run() {
        let (g, c, gamma, obs) = linear_fixture();
        let init = vec![DVector::from_vec(vec![1.0, -1.0, 0.5])];
        let pert = perturb_with(&obs, vec![DVector::from_vec(vec![0.05, 0.1])]).unwrap();
        let p = IrEnlmParams::new(0.6, 1.8, 1);
        let run = run_members(&init, &pert, &gamma, &c, &p, &g).unwrap();
        let one = run_member(0, &init[0], &pert.y[0], pert.eta[0], &p, &c, &gamma, &g);
        assert_eq!(run.members[0], one.u);
        assert_eq!(run.member_traces[0].misfits, one.trace.misfits);
        assert_eq!(run.forward_calls, one.forward_calls);
    }

    #[test]
    fn discrepancy_contract_on_linear_problem() {
        let (g, c, gamma, obs) = linear_fixture();
        let init: Vec<_> = (0..6)
            .map(|j| DVector::from_fn(3, |i, _| ((i + 2 * j) as f64).sin() * 2.0))
            .collect();
        let pert = perturb(&obs, 6, 9).unwrap();
        let p = IrEnlmParams::new(0.7, 1.0 / 0.7 + 0.1, 6);
        let run = run_members(&init, &pert, &gamma, &c, &p, &g).unwrap();
        for t in &run.member_traces {
            let thr = t.threshold.unwrap();
            assert_eq!(t.misfits.len(), t.iterations + 1);
            assert!(*t.misfits.last().unwrap() <= thr);
            if t.iterations > 0 {
                assert!(t.misfits[t.iterations - 1] > thr);
            }
        }
    }

    #[test]
    fn member_order_does_not_matter() {
        let (g, c, gamma, obs) = linear_fixture();
        let init: Vec<_> = (0..4)
            .map(|j| DVector::from_fn(3, |i, _| ((3 * i + j) as f64).cos() * 3.0))
            .collect();
        let pert = perturb(&obs, 4, 2).unwrap();
        let p = IrEnlmParams::new(0.5, 2.5, 4);
        let run = run_members(&init, &pert, &gamma, &c, &p, &g).unwrap();
        let rev_init: Vec<_> = init.iter().rev().cloned().collect();
        let rev_pert = perturb_with(&obs, pert.xi.iter().rev().cloned().collect()).unwrap();
        let rev = run_members(&rev_init, &rev_pert, &gamma, &c, &p, &g).unwrap();
        for j in 0..4 {
            assert_eq!(run.members[j], rev.members[3 - j]);
        }
    }
}

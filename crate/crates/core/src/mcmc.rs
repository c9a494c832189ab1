//! Preconditioned Crank–Nicolson MCMC for the reference posterior.
//!
//! The proposal `v = ū + √(1−β²)(u − ū) + β L z` is reversible with respect
//! to the Gaussian prior, so acceptance depends on the data misfit
//! `Φ(u) = ½‖Γ^{-1/2}(y − G(u))‖²` alone.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::field::{standard_normal_vector, GaussianPrior};
use crate::forward::ForwardModel;
use crate::io::{read_f64s, write_bytes, write_f64s};
use crate::observations::{weighted_diag_norm, ObservationSet};
use crate::rng::{substream, tag};

/// The negative log-likelihood `Φ`.
pub trait Potential: Sync {
    fn phi(&self, u: &DVector<f64>) -> Result<f64>;
}

/// `Φ(u) = ½‖Γ^{-1/2}(y − G(u))‖²`.
pub struct DataMisfit<'a, F: ?Sized> {
    pub forward: &'a F,
    pub y: &'a DVector<f64>,
    pub gamma: &'a DVector<f64>,
}

impl<'a, F: ForwardModel + ?Sized> DataMisfit<'a, F> {
    pub fn new(forward: &'a F, obs: &'a ObservationSet) -> Self {
        Self {
            forward,
            y: &obs.y,
            gamma: &obs.gamma_diag,
        }
    }
}

impl<F: ForwardModel + ?Sized> Potential for DataMisfit<'_, F> {
    fn phi(&self, u: &DVector<f64>) -> Result<f64> {
        let g = self.forward.evaluate(u)?;
        ensure_len("forward output", self.y.len(), g.len())?;
        let m = weighted_diag_norm(&(self.y - g), self.gamma);
        Ok(0.5 * m * m)
    }
}

/// `Φ ≡ 0`: the chain then samples the prior.
pub struct Flat;

impl Potential for Flat {
    fn phi(&self, _u: &DVector<f64>) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct PcnStep {
    pub u: DVector<f64>,
    pub phi: f64,
    pub accepted: bool,
}

/// One pCN transition from `u` (with potential `phi_u`). A proposal whose
/// potential cannot be evaluated is rejected.
pub fn pcn_step<P: Potential + ?Sized, R: Rng + ?Sized>(
    u: &DVector<f64>,
    phi_u: f64,
    prior: &GaussianPrior,
    beta: f64,
    potential: &P,
    rng: &mut R,
) -> Result<PcnStep> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidInput(format!("beta must lie in (0,1], got {beta}")));
    }
    let z = standard_normal_vector(prior.dim(), rng);
    let log_u: f64 = rng.random::<f64>().ln();
    let mean = &prior.mean.values;
    let v = mean + (u - mean) * (1.0 - beta * beta).sqrt() + &prior.factor * z * beta;
    let phi_v = match potential.phi(&v) {
        Ok(p) if p.is_finite() => p,
        Ok(_) => f64::INFINITY,
        Err(e) => {
            log::debug!("pCN proposal rejected: {e}");
            f64::INFINITY
        }
    };
    if phi_v <= phi_u || log_u < phi_u - phi_v {
        Ok(PcnStep {
            u: v,
            phi: phi_v,
            accepted: true,
        })
    } else {
        Ok(PcnStep {
            u: u.clone(),
            phi: phi_u,
            accepted: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcnParams {
    /// Step size; the starting value when tuning is enabled.
    pub beta: f64,
    pub n_chains: usize,
    pub chain_length: usize,
    /// Discarded leading steps; `None` means half the chain.
    pub burn_in: Option<usize>,
    /// Keep every `thin`-th state.
    pub thin: usize,
    /// Tune `β` towards 20–30% acceptance before the main run.
    pub tune: bool,
    pub tune_round_steps: usize,
    pub tune_max_rounds: usize,
    /// Checkpoint period in steps (0 disables checkpoints).
    pub checkpoint_every: usize,
}

impl Default for PcnParams {
    fn default() -> Self {
        Self {
            beta: 0.2,
            n_chains: 4,
            chain_length: 10_000,
            burn_in: None,
            thin: 10,
            tune: true,
            tune_round_steps: 200,
            tune_max_rounds: 15,
            checkpoint_every: 0,
        }
    }
}

impl PcnParams {
    pub fn burn_in_steps(&self) -> usize {
        self.burn_in.unwrap_or(self.chain_length / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidInput(format!("beta must lie in (0,1], got {}", self.beta)));
        }
        if self.n_chains == 0 || self.chain_length == 0 || self.thin == 0 {
            return Err(Error::InvalidInput(
                "n_chains, chain_length and thin must be at least 1".into(),
            ));
        }
        if self.burn_in_steps() >= self.chain_length {
            return Err(Error::InvalidInput("burn_in must be shorter than the chain".into()));
        }
        if self.tune && (self.tune_round_steps == 0 || self.tune_max_rounds == 0) {
            return Err(Error::InvalidInput("tuning rounds must be non-empty".into()));
        }
        Ok(())
    }
}

/// Retained states of one chain: the state after step `steps[k]` is
/// `samples[k]` with potential `phis[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub chain: usize,
    pub steps: Vec<usize>,
    pub samples: Vec<DVector<f64>>,
    pub phis: Vec<f64>,
    pub accepted: usize,
    pub total: usize,
}

impl ChainRecord {
    pub fn acceptance_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSet {
    pub beta: f64,
    /// `(β, acceptance rate)` of each tuning round.
    pub tuning: Vec<(f64, f64)>,
    pub chains: Vec<ChainRecord>,
}

/// Short pilot runs from a prior draw: β shrinks when acceptance is below
/// 20% and grows when it is above 30%.
pub fn tune_beta<P: Potential + ?Sized>(
    prior: &GaussianPrior,
    potential: &P,
    params: &PcnParams,
    seed: u64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut rng = substream(seed, &[tag::TUNING]);
    let mut u = prior.draw(&mut rng);
    let mut phi = potential.phi(&u)?;
    let mut beta = params.beta;
    let mut trace = Vec::new();
    for _ in 0..params.tune_max_rounds {
        let mut acc = 0usize;
        for _ in 0..params.tune_round_steps {
            let s = pcn_step(&u, phi, prior, beta, potential, &mut rng)?;
            acc += s.accepted as usize;
            u = s.u;
            phi = s.phi;
        }
        let rate = acc as f64 / params.tune_round_steps as f64;
        trace.push((beta, rate));
        if rate < 0.2 {
            beta *= 0.6;
        } else if rate > 0.3 {
            beta = (beta * 1.5).min(1.0);
        } else {
            break;
        }
    }
    Ok((beta, trace))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainState {
    step: usize,
    accepted: usize,
    phi: f64,
    word_pos: String,
    beta: f64,
    segments: usize,
    u: Vec<f64>,
}

fn chain_dir(root: &Path, chain: usize) -> PathBuf {
    root.join(format!("chain_{chain:03}"))
}

fn segment_paths(dir: &Path, k: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("segment_{k:05}.f64")),
        dir.join(format!("segment_{k:05}_phi.f64")),
    )
}

fn read_state(dir: &Path) -> Result<Option<ChainState>> {
    let p = dir.join("state.json");
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

/// One chain of `params.chain_length` steps from a prior draw on substream
/// `(seed, CHAIN, chain)`. With a checkpoint directory, the retained states
/// are written in segments together with the generator position, and a
/// rerun resumes from the last complete segment.
pub fn run_chain<P: Potential + ?Sized>(
    chain: usize,
    prior: &GaussianPrior,
    potential: &P,
    params: &PcnParams,
    beta: f64,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<ChainRecord> {
    let mut rng: ChaCha20Rng = substream(seed, &[tag::CHAIN, chain as u64]);
    let mut rec = ChainRecord {
        chain,
        steps: Vec::new(),
        samples: Vec::new(),
        phis: Vec::new(),
        accepted: 0,
        total: 0,
    };
    let dir = checkpoint.map(|root| chain_dir(root, chain));
    let n = prior.dim();
    let mut u;
    let mut phi;
    let mut segments = 0usize;
    let resumed = match &dir {
        Some(d) => read_state(d)?.filter(|s| s.beta == beta && s.u.len() == n),
        None => None,
    };
    if let (Some(state), Some(d)) = (resumed, &dir) {
        for k in 0..state.segments {
            let (sp, pp) = segment_paths(d, k);
            let flat = read_f64s(&sp)?;
            let phis = read_f64s(&pp)?;
            if flat.len() != phis.len() * n {
                return Err(Error::Format(format!("{}: truncated segment", sp.display())));
            }
            rec.samples
                .extend(flat.chunks_exact(n).map(|c| DVector::from_column_slice(c)));
            rec.phis.extend(phis);
        }
        rec.steps = (1..=state.step).filter(|s| s % params.thin == 0).collect();
        if rec.steps.len() != rec.samples.len() {
            return Err(Error::Format("checkpoint segments disagree with state".into()));
        }
        rec.accepted = state.accepted;
        rec.total = state.step;
        segments = state.segments;
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::Format("bad generator position in checkpoint".into()))?;
        rng.set_word_pos(pos);
        u = DVector::from_vec(state.u);
        phi = state.phi;
        log::info!("chain {chain}: resumed at step {}", state.step);
    } else {
        u = prior.draw(&mut rng);
        phi = potential.phi(&u)?;
    }
    let mut seg_start = rec.samples.len();
    for step in (rec.total + 1)..=params.chain_length {
        let s = pcn_step(&u, phi, prior, beta, potential, &mut rng)?;
        rec.accepted += s.accepted as usize;
        rec.total = step;
        u = s.u;
        phi = s.phi;
        if step % params.thin == 0 {
            rec.steps.push(step);
            rec.samples.push(u.clone());
            rec.phis.push(phi);
        }
        let at_checkpoint = params.checkpoint_every > 0
            && (step % params.checkpoint_every == 0 || step == params.chain_length);
        if let (true, Some(d)) = (at_checkpoint, &dir) {
            let (sp, pp) = segment_paths(d, segments);
            let flat: Vec<f64> = rec.samples[seg_start..]
                .iter()
                .flat_map(|v| v.iter().copied())
                .collect();
            write_f64s(&sp, &flat)?;
            write_f64s(&pp, &rec.phis[seg_start..])?;
            segments += 1;
            seg_start = rec.samples.len();
            let state = ChainState {
                step,
                accepted: rec.accepted,
                phi,
                word_pos: rng.get_word_pos().to_string(),
                beta,
                segments,
                u: u.as_slice().to_vec(),
            };
            let json = serde_json::to_string(&state)
                .map_err(|e| Error::Format(format!("chain state: {e}")))?;
            write_bytes(&d.join("state.json"), json.as_bytes())?;
        }
    }
    Ok(rec)
}

/// Tunes `β` (if requested) and runs all chains in parallel.
pub fn run_chains<P: Potential + ?Sized>(
    prior: &GaussianPrior,
    potential: &P,
    params: &PcnParams,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<ChainSet> {
    params.validate()?;
    let (beta, tuning) = if params.tune {
        tune_beta(prior, potential, params, seed)?
    } else {
        (params.beta, Vec::new())
    };
    log::info!("pCN step size beta = {beta:.4}");
    let chains = (0..params.n_chains)
        .into_par_iter()
        .map(|c| run_chain(c, prior, potential, params, beta, seed, checkpoint))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainSet { beta, tuning, chains })
}

/// Gelman–Rubin potential scale reduction factor of equal-length scalar
/// traces: `√(((n−1)/n·W + B/n)/W)`.
pub fn psrf(traces: &[Vec<f64>]) -> Result<f64> {
    let m = traces.len();
    if m < 2 {
        return Err(Error::InvalidInput("PSRF needs at least 2 chains".into()));
    }
    let n = traces[0].len();
    if n < 10 || traces.iter().any(|t| t.len() != n) {
        return Err(Error::InvalidInput(
            "PSRF needs equal-length traces of at least 10 samples".into(),
        ));
    }
    let nf = n as f64;
    let means: Vec<f64> = traces.iter().map(|t| t.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = nf / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = traces
        .iter()
        .zip(&means)
        .map(|(t, mu)| t.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    if !(w > 0.0) {
        return Err(Error::Degenerate("zero within-chain variance".into()));
    }
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

fn retained<'a>(chain: &'a ChainRecord, burn_in: usize, thin: usize) -> impl Iterator<Item = usize> + 'a {
    let thin = thin.max(1);
    chain
        .steps
        .iter()
        .enumerate()
        .filter(move |(_, s)| **s > burn_in && **s % thin == 0)
        .map(|(k, _)| k)
}

/// Per-cell PSRF over the states retained after `burn_in`, aggregated by
/// the maximum. Cells whose chains are all constant are skipped.
pub fn max_cell_psrf(chains: &[ChainRecord], burn_in: usize) -> Result<f64> {
    let idx: Vec<Vec<usize>> = chains.iter().map(|c| retained(c, burn_in, 1).collect()).collect();
    let len = idx.iter().map(|v| v.len()).min().unwrap_or(0);
    let dim = chains.first().and_then(|c| c.samples.first()).map_or(0, |s| s.len());
    let mut worst: f64 = 0.0;
    let mut any = false;
    for cell in 0..dim {
        let traces: Vec<Vec<f64>> = chains
            .iter()
            .zip(&idx)
            .map(|(c, ix)| ix[..len].iter().map(|&k| c.samples[k][cell]).collect())
            .collect();
        match psrf(&traces) {
            Ok(r) => {
                worst = worst.max(r);
                any = true;
            }
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if !any {
        return Err(Error::Degenerate("every cell has zero within-chain variance".into()));
    }
    Ok(worst)
}

/// Pooled per-cell mean and population variance of every retained state
/// after `burn_in`, keeping steps that are multiples of `thin`.
pub fn posterior_moments(
    chains: &[ChainRecord],
    burn_in: usize,
    thin: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let pool: Vec<&DVector<f64>> = chains
        .iter()
        .flat_map(|c| retained(c, burn_in, thin).map(move |k| &c.samples[k]))
        .collect();
    if pool.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "posterior moments need at least 2 retained states, have {}",
            pool.len()
        )));
    }
    let n = pool[0].len();
    let cnt = pool.len() as f64;
    let mut mean = DVector::zeros(n);
    for s in &pool {
        mean += *s;
    }
    mean /= cnt;
    let mut var = DVector::zeros(n);
    for s in &pool {
        let d = *s - &mean;
        var += d.component_mul(&d);
    }
    var /= cnt;
    Ok((mean, var))
}

/// Standard error of the mean of a correlated trace by non-overlapping
/// batch means with `batches` batches.
pub fn batch_means_se(trace: &[f64], batches: usize) -> Result<f64> {
    if batches < 2 || trace.len() < 2 * batches {
        return Err(Error::InvalidInput("trace too short for batch means".into()));
    }
    let size = trace.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| trace[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    Ok((var / batches as f64).sqrt())
}

/// Analytic posterior of `u ~ N(m, C)`, `y = A u + N(0, diag γ)`:
/// `(mean, covariance)`.
pub fn linear_gaussian_posterior(
    a: &DMatrix<f64>,
    prior_mean: &DVector<f64>,
    c: &DMatrix<f64>,
    gamma: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cat = c * a.transpose();
    let mut s = a * &cat;
    for i in 0..gamma.len() {
        s[(i, i)] += gamma[i];
    }
    let ch = crate::linalg::cholesky(&s)
        .ok_or_else(|| Error::Factorization("A C Aᵀ + Γ not positive definite".into()))?;
    let gain_t = ch.solve(&cat.transpose());
    let mean = prior_mean + gain_t.transpose() * (y - a * prior_mean);
    let cov = c - &cat * &gain_t;
    Ok((mean, 0.5 * (&cov + cov.transpose())))
}

//! Synthetic data, the diagonal noise covariance, noise levels and per-member
//! data perturbations.

use std::path::Path;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::field::Field;
use crate::forward::ForwardModel;
use crate::reservoir::{ReservoirForward, ReservoirModelConfig, SimTrajectory, WellKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementKind {
    Bhp,
    WaterRate,
    /// Entry of a synthetic (non-reservoir) operator.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementEntry {
    /// Well index in configuration order, if any.
    pub source: Option<usize>,
    pub label: String,
    pub step: usize,
    pub time_s: f64,
    pub kind: MeasurementKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MeasurementLayout {
    pub entries: Vec<MeasurementEntry>,
}

impl MeasurementLayout {
    pub fn generic(n: usize) -> Self {
        Self {
            entries: (0..n)
                .map(|k| MeasurementEntry {
                    source: None,
                    label: format!("d{k}"),
                    step: 0,
                    time_s: 0.0,
                    kind: MeasurementKind::Generic,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub y: DVector<f64>,
    pub gamma_diag: DVector<f64>,
    /// Noise level used by the stopping rules.
    pub eta: f64,
    pub layout: MeasurementLayout,
    /// `‖Γ^{-1/2} ξ‖` of the realized synthetic noise, for diagnostics.
    pub realized_noise_level: Option<f64>,
    /// Noise-free data `G(u†)` when known.
    pub clean: Option<DVector<f64>>,
}

impl ObservationSet {
    pub fn new(
        y: DVector<f64>,
        gamma_diag: DVector<f64>,
        eta: f64,
        layout: MeasurementLayout,
    ) -> Result<Self> {
        ensure_len("noise covariance", y.len(), gamma_diag.len())?;
        ensure_len("measurement layout", y.len(), layout.len())?;
        if gamma_diag.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidInput("Γ must have positive finite diagonal".into()));
        }
        if !(eta >= 0.0) {
            return Err(Error::InvalidInput("noise level must be nonnegative".into()));
        }
        Ok(Self {
            y,
            gamma_diag,
            eta,
            layout,
            realized_noise_level: None,
            clean: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `‖Γ^{-1/2} v‖`.
    pub fn weighted_norm(&self, v: &DVector<f64>) -> f64 {
        weighted_diag_norm(v, &self.gamma_diag)
    }

    /// `‖Γ^{-1/2}(y − g)‖`.
    pub fn misfit(&self, g: &DVector<f64>) -> f64 {
        self.weighted_norm(&(&self.y - g))
    }

    pub fn std(&self) -> DVector<f64> {
        self.gamma_diag.map(f64::sqrt)
    }
}

pub(crate) fn weighted_diag_norm(v: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
    v.iter()
        .zip(gamma.iter())
        .map(|(a, g)| a * a / g)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct PerturbedObservations {
    pub y: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    pub eta: Vec<f64>,
}

impl PerturbedObservations {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub const BHP_REL_STD: f64 = 0.10;
pub const RATE_STD_BEFORE: f64 = 0.03;
pub const RATE_STD_AFTER: f64 = 0.07;
pub const BREAKTHROUGH_SATURATION: f64 = 1e-3;
const STD_FLOOR_REL: f64 = 1e-6;

/// Diagonal of Γ.
///
/// BHP (and generic) entries get 10% of `|clean|`; water rates get 3% of the
/// nominal total rate before breakthrough at their well and 7% from the
/// breakthrough step on. `nominal` is per entry; `breakthrough` is indexed
/// by well (configuration order).
pub fn build_noise_covariance(
    clean: &DVector<f64>,
    layout: &MeasurementLayout,
    nominal: &DVector<f64>,
    breakthrough: &[Option<usize>],
) -> Result<DVector<f64>> {
    ensure_len("layout", clean.len(), layout.len())?;
    ensure_len("nominal rates", clean.len(), nominal.len())?;
    let max_abs = clean.amax();
    if !(max_abs > 0.0) {
        return Err(Error::InvalidInput("noise-free data vector is identically zero".into()));
    }
    let floor = STD_FLOOR_REL * max_abs;
    let mut gamma = DVector::zeros(clean.len());
    for (k, e) in layout.entries.iter().enumerate() {
        let std = match e.kind {
            MeasurementKind::Bhp | MeasurementKind::Generic => BHP_REL_STD * clean[k].abs(),
            MeasurementKind::WaterRate => {
                let bt = e.source.and_then(|w| breakthrough.get(w).copied().flatten());
                let after = bt.is_some_and(|b| e.step >= b);
                let frac = if after { RATE_STD_AFTER } else { RATE_STD_BEFORE };
                frac * nominal[k].abs()
            }
        };
        let std = std.max(floor);
        gamma[k] = std * std;
    }
    Ok(gamma)
}

/// First step at which each producer's cell saturation exceeds
/// [`BREAKTHROUGH_SATURATION`]; `None` for injectors and unswept producers.
pub fn breakthrough_steps(traj: &SimTrajectory, config: &ReservoirModelConfig) -> Vec<Option<usize>> {
    config
        .wells
        .iter()
        .map(|w| {
            if w.kind != WellKind::Producer {
                return None;
            }
            let c = config.geometry.index(w.cell.0, w.cell.1);
            traj.saturations
                .iter()
                .position(|s| s.values[c] > BREAKTHROUGH_SATURATION)
        })
        .collect()
}

/// Per-entry nominal total rate in measurement order.
pub fn nominal_rates(traj: &SimTrajectory, config: &ReservoirModelConfig) -> DVector<f64> {
    DVector::from_iterator(
        config.n_data(),
        config
            .measurement_order()
            .into_iter()
            .flat_map(|w| traj.nominal_rates[w].clone()),
    )
}

pub fn estimate_noise_level(m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one measurement".into()));
    }
    Ok((m as f64).sqrt())
}

/// Noise realization used by [`synthesize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseDraw {
    Sampled,
    /// `ξ = 0`; test hook.
    Zero,
}

fn gaussian_noise(gamma_diag: &DVector<f64>, seed: u64, path: &[u64]) -> DVector<f64> {
    let mut r = rng::substream(seed, path);
    gamma_diag.map(|g| {
        let z: f64 = StandardNormal.sample(&mut r);
        g.sqrt() * z
    })
}

/// `y = clean + ξ`, `ξ ~ N(0, Γ)`, with `η = √M`.
pub fn synthesize_from_clean(
    clean: DVector<f64>,
    gamma_diag: DVector<f64>,
    layout: MeasurementLayout,
    seed: u64,
    draw: NoiseDraw,
) -> Result<ObservationSet> {
    let xi = match draw {
        NoiseDraw::Sampled => gaussian_noise(&gamma_diag, seed, &[rng::tag::SYNTH_NOISE]),
        NoiseDraw::Zero => DVector::zeros(clean.len()),
    };
    let eta = estimate_noise_level(clean.len())?;
    let realized = weighted_diag_norm(&xi, &gamma_diag);
    let mut obs = ObservationSet::new(&clean + &xi, gamma_diag, eta, layout)?;
    obs.realized_noise_level = Some(realized);
    obs.clean = Some(clean);
    Ok(obs)
}

/// Synthetic reservoir data from the truth `u_truth`.
pub fn synthesize(
    u_truth: &Field,
    config: &ReservoirModelConfig,
    seed: u64,
    draw: NoiseDraw,
) -> Result<ObservationSet> {
    let g = ReservoirForward::new(config, Default::default())?;
    let traj = g.simulate(&u_truth.values)?;
    let clean = traj.data_vector(config);
    let layout = config.measurement_layout();
    let gamma = build_noise_covariance(
        &clean,
        &layout,
        &nominal_rates(&traj, config),
        &breakthrough_steps(&traj, config),
    )?;
    synthesize_from_clean(clean, gamma, layout, seed, draw)
}

/// Synthetic data for an arbitrary forward map with given Γ.
pub fn synthesize_generic<F: ForwardModel>(
    forward: &F,
    u_truth: &DVector<f64>,
    gamma_diag: DVector<f64>,
    seed: u64,
    draw: NoiseDraw,
) -> Result<ObservationSet> {
    let clean = forward.evaluate(u_truth)?;
    let layout = MeasurementLayout::generic(clean.len());
    synthesize_from_clean(clean, gamma_diag, layout, seed, draw)
}

/// Per-member data `y_j = y + ξ_j` with `η_j = η + ½‖Γ^{-1/2} ξ_j‖`.
/// Member `j` draws from substream `(seed, j)`.
pub fn perturb(obs: &ObservationSet, n_e: usize, seed: u64) -> Result<PerturbedObservations> {
    if n_e == 0 {
        return Err(Error::InvalidInput("ensemble size must be at least 1".into()));
    }
    let xi = (0..n_e)
        .map(|j| gaussian_noise(&obs.gamma_diag, seed, &[rng::tag::PERTURB, j as u64]))
        .collect();
    perturb_with(obs, xi)
}

/// [`perturb`] with prescribed noise vectors.
pub fn perturb_with(obs: &ObservationSet, xi: Vec<DVector<f64>>) -> Result<PerturbedObservations> {
    for x in &xi {
        ensure_len("data perturbation", obs.len(), x.len())?;
    }
    let y = xi.iter().map(|x| &obs.y + x).collect();
    let eta = xi
        .iter()
        .map(|x| obs.eta + 0.5 * obs.weighted_norm(x))
        .collect();
    Ok(PerturbedObservations { y, xi, eta })
}

/// CSV with columns `index,well,step,time_s,kind,value,std`.
pub fn write_observations_csv(path: &Path, obs: &ObservationSet) -> Result<()> {
    let mut out = String::from("index,well,step,time_s,kind,value,std\n");
    for (k, e) in obs.layout.entries.iter().enumerate() {
        let kind = match e.kind {
            MeasurementKind::Bhp => "bhp",
            MeasurementKind::WaterRate => "water-rate",
            MeasurementKind::Generic => "generic",
        };
        out.push_str(&format!(
            "{},{},{},{:e},{},{:e},{:e}\n",
            k,
            e.label,
            e.step + 1,
            e.time_s,
            kind,
            obs.y[k],
            obs.gamma_diag[k].sqrt()
        ));
    }
    crate::io::write_bytes(path, out.as_bytes())
}

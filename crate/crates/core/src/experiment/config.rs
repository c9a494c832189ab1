//! TOML experiment configuration.
//!
//! ```toml
//! replications = 5
//!
//! [seeds]
//! truth = 1
//! noise = 2
//! ensemble = 3
//! mcmc = 4
//!
//! [prior]
//! mean = -28.324        # log-permeability, log(m²)
//! sigma2 = 1.0
//! range_max = 1000.0
//! range_min = 500.0
//! angle = 1.5708
//!
//! [reservoir]
//! preset = "desk"       # or give a full model under [reservoir.custom]
//! model = "A"
//! jacobian = "adjoint"  # or "fd"
//!
//! [[ir_enlm]]
//! label = "rho0.8"
//! rho = 0.8
//! tau = 1.0
//! n_e = 25
//!
//! [[ir_es]]
//! rho = 0.8
//! tau = 1.25
//! m_es = 10
//!
//! [[es]]
//! n_e = 25
//!
//! [[rml]]
//! kappa = 10.0
//!
//! [mcmc]
//! n_chains = 4
//! chain_length = 30000
//! ```
//!
//! Every method block accepts `label` (defaults to the method name plus
//! the block index), `replications` and `seed`, which override the
//! top-level values for that block.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::RmlLmParams;
use crate::field::{build_spherical_covariance, factorize_prior, Field, GaussianPrior, SphericalCovarianceSpec};
use crate::ir_enlm::IrEnlmParams;
use crate::ir_es::IrEsParams;
use crate::mcmc::PcnParams;
use crate::reservoir::{JacobianMethod, ReservoirForward, ReservoirModelConfig, WellModel};
use crate::forward::FdScheme;

/// Seeds for every random stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub truth: u64,
    pub noise: u64,
    /// Base seed of the method runs; replication `r` uses
    /// `derive_seed(ensemble, [REPLICATION, r])`.
    pub ensemble: u64,
    pub mcmc: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub mean: f64,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default = "default_range_max")]
    pub range_max: f64,
    #[serde(default = "default_range_min")]
    pub range_min: f64,
    #[serde(default = "default_angle")]
    pub angle: f64,
}

fn default_sigma2() -> f64 {
    SphericalCovarianceSpec::default().sigma2
}
fn default_range_max() -> f64 {
    SphericalCovarianceSpec::default().range_max
}
fn default_range_min() -> f64 {
    SphericalCovarianceSpec::default().range_min
}
fn default_angle() -> f64 {
    SphericalCovarianceSpec::default().angle
}

impl PriorSection {
    pub fn covariance_spec(&self) -> SphericalCovarianceSpec {
        SphericalCovarianceSpec {
            sigma2: self.sigma2,
            range_max: self.range_max,
            range_min: self.range_min,
            angle: self.angle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 20×20 five-spot, 10 report steps.
    #[default]
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianChoice {
    #[default]
    Adjoint,
    /// Forward differences with step 1e-6.
    Fd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirSection {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_model")]
    pub model: WellModel,
    #[serde(default)]
    pub jacobian: JacobianChoice,
    /// Replaces the preset entirely when present.
    #[serde(default)]
    pub custom: Option<ReservoirModelConfig>,
}

fn default_model() -> WellModel {
    WellModel::A
}

impl ReservoirSection {
    pub fn model_config(&self) -> ReservoirModelConfig {
        match &self.custom {
            Some(c) => c.clone(),
            None => match self.preset {
                Preset::Desk => ReservoirModelConfig::desk(self.model),
            },
        }
    }

    pub fn jacobian_method(&self) -> JacobianMethod {
        match self.jacobian {
            JacobianChoice::Adjoint => JacobianMethod::Adjoint,
            JacobianChoice::Fd => JacobianMethod::FiniteDifference {
                scheme: FdScheme::Forward,
                step: 1e-6,
            },
        }
    }
}

/// Block-level overrides shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block<P> {
    pub label: Option<String>,
    pub replications: Option<usize>,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub params: P,
}

// Hand-rolled so that unknown keys still reach the parameter struct's
// `deny_unknown_fields` (serde's `flatten` would swallow them).
impl<'de, P: serde::de::DeserializeOwned> Deserialize<'de> for Block<P> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut table = toml::Table::deserialize(d)?;
        fn take<T: serde::de::DeserializeOwned, E: serde::de::Error>(
            t: &mut toml::Table,
            key: &str,
        ) -> Result<Option<T>, E> {
            t.remove(key)
                .map(|v| v.try_into().map_err(|e| E::custom(format!("{key}: {e}"))))
                .transpose()
        }
        let label = take(&mut table, "label")?;
        let replications = take(&mut table, "replications")?;
        let seed = take(&mut table, "seed")?;
        let params = toml::Value::Table(table).try_into().map_err(D::Error::custom)?;
        Ok(Self {
            label,
            replications,
            seed,
            params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsParams {
    pub n_e: usize,
}

impl Default for EsParams {
    fn default() -> Self {
        Self { n_e: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub replications: usize,
    pub seeds: Seeds,
    pub prior: PriorSection,
    pub reservoir: ReservoirSection,
    #[serde(default)]
    pub ir_enlm: Vec<Block<IrEnlmParams>>,
    #[serde(default)]
    pub ir_es: Vec<Block<IrEsParams>>,
    #[serde(default)]
    pub es: Vec<Block<EsParams>>,
    #[serde(default)]
    pub rml: Vec<Block<RmlLmParams>>,
    #[serde(default)]
    pub mcmc: Option<PcnParams>,
}

fn one() -> usize {
    1
}

/// The method families `run` accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    IrEnlm,
    IrEs,
    Es,
    Rml,
    Mcmc,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::IrEnlm, Method::IrEs, Method::Es, Method::Rml, Method::Mcmc];

    pub fn name(self) -> &'static str {
        match self {
            Method::IrEnlm => "ir-enlm",
            Method::IrEs => "ir-es",
            Method::Es => "es",
            Method::Rml => "rml",
            Method::Mcmc => "mcmc",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// A method block resolved against the top-level defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    pub label: String,
    pub replications: usize,
    pub seed: u64,
    pub spec: MethodSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum MethodSpec {
    IrEnlm(IrEnlmParams),
    IrEs(IrEsParams),
    Es(EsParams),
    Rml(RmlLmParams),
}

impl MethodSpec {
    pub fn n_e(&self) -> usize {
        match self {
            MethodSpec::IrEnlm(p) => p.n_e,
            MethodSpec::IrEs(p) => p.n_e,
            MethodSpec::Es(p) => p.n_e,
            MethodSpec::Rml(p) => p.n_e,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.replications == 0 {
            return Err("replications must be at least 1".into());
        }
        self.prior.covariance_spec().validate().map_err(|e| e.to_string())?;
        if !self.prior.mean.is_finite() {
            return Err("prior mean must be finite".into());
        }
        self.reservoir.model_config().validate().map_err(|e| e.to_string())?;
        for b in &self.ir_enlm {
            b.params.validate().map_err(|e| e.to_string())?;
        }
        for b in &self.ir_es {
            b.params.validate().map_err(|e| e.to_string())?;
        }
        for b in &self.es {
            if b.params.n_e < 2 {
                return Err("es needs n_e >= 2".into());
            }
        }
        for b in &self.rml {
            b.params.validate().map_err(|e| e.to_string())?;
        }
        if let Some(m) = &self.mcmc {
            m.validate().map_err(|e| e.to_string())?;
        }
        let runs = self.method_runs();
        if runs.iter().any(|r| r.replications == 0) {
            return Err("replications must be at least 1".into());
        }
        let mut labels: Vec<(Method, &str)> = runs.iter().map(|r| (r.method, r.label.as_str())).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err("method labels must be unique within each method".into());
        }
        if runs.iter().any(|r| {
            r.label.is_empty() || !r.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        }) {
            return Err("labels may only contain ASCII letters, digits, '-', '_' and '.'".into());
        }
        Ok(())
    }

    pub fn prior(&self) -> crate::Result<GaussianPrior> {
        let cfg = self.reservoir.model_config();
        let cov = build_spherical_covariance(&cfg.geometry, &self.prior.covariance_spec())?;
        factorize_prior(Field::constant(cfg.geometry, self.prior.mean), cov)
    }

    pub fn forward(&self) -> crate::Result<ReservoirForward> {
        ReservoirForward::new(&self.reservoir.model_config(), self.reservoir.jacobian_method())
    }

    fn resolve<P>(&self, method: Method, k: usize, b: &Block<P>, spec: MethodSpec) -> MethodRun {
        MethodRun {
            method,
            label: b.label.clone().unwrap_or_else(|| format!("{}-{k}", method.name())),
            replications: b.replications.unwrap_or(self.replications),
            seed: b.seed.unwrap_or(self.seeds.ensemble),
            spec,
        }
    }

    /// Every configured method block, in file order within each method.
    pub fn method_runs(&self) -> Vec<MethodRun> {
        let mut out = Vec::new();
        for (k, b) in self.ir_enlm.iter().enumerate() {
            out.push(self.resolve(Method::IrEnlm, k, b, MethodSpec::IrEnlm(b.params)));
        }
        for (k, b) in self.ir_es.iter().enumerate() {
            out.push(self.resolve(Method::IrEs, k, b, MethodSpec::IrEs(b.params)));
        }
        for (k, b) in self.es.iter().enumerate() {
            out.push(self.resolve(Method::Es, k, b, MethodSpec::Es(b.params)));
        }
        for (k, b) in self.rml.iter().enumerate() {
            out.push(self.resolve(Method::Rml, k, b, MethodSpec::Rml(b.params)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [seeds]
        truth = 1
        noise = 2
        ensemble = 3
        mcmc = 4
        [prior]
        mean = -28.0
        [reservoir]
        model = "A"
    "#;

    #[test]
    fn parses_blocks_with_overrides() {
        let text = format!(
            "{MINIMAL}\n[[ir_enlm]]\nlabel = \"a\"\nrho = 0.7\ntau = 1.5\nreplications = 2\n\
             [[ir_enlm]]\nrho = 0.9\ntau = 1.2\nseed = 99\n[[es]]\nn_e = 10\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let runs = cfg.method_runs();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[0].label, "a");
        assert_eq!(runs[0].replications, 2);
        assert_eq!(runs[1].label, "ir-enlm-1");
        assert_eq!(runs[1].seed, 99);
        assert_eq!(runs[1].spec.n_e(), 25);
        assert_eq!(runs[2].spec, MethodSpec::Es(EsParams { n_e: 10 }));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            format!("{MINIMAL}\nbogus = 1\n"),
            format!("{MINIMAL}\n[[ir_enlm]]\nrho = 1.5\n"),
            format!("{MINIMAL}\n[[ir_enlm]]\nrhoo = 0.5\n"),
            format!("{MINIMAL}\n[[es]]\nlabel = \"x\"\n[[es]]\nlabel = \"x\"\n"),
            format!("{MINIMAL}\n[[es]]\nlabel = \"a/b\"\n"),
            MINIMAL.replace("ensemble = 3", ""),
            format!("replications = 0\n{MINIMAL}"),
        ] {
            assert!(ExperimentConfig::from_toml(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("enkf"), None);
    }
}

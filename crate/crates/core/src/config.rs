//! Experiment configuration: a flat TOML schema whose fields carry the same
//! units the experiment write-ups use (half-lives in steps, covariance trace
//! per dimension, drift scale), so published constants transcribe directly.
//!
//! A config describes one experiment: the model shape, the observation
//! horizon, per-namespace priors and dynamics, and the knobs for the bandit
//! and AdaGrad variants. The same file drives estimation and bandit runs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DekfError, Result};
use crate::expfam::{self, Family, FamilyKind, Link};
use crate::filter::half_life_to_alpha;
use crate::signal::{EntityId, SignalModel};

/// Which experiment family the config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Regression,
    Mf,
    Tf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionCfg {
    /// Dimension of each context vector (and of the single weight entity).
    pub context_dim: usize,
    /// Number of fixed context vectors drawn once per simulation.
    pub context_pool: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfCfg {
    pub users: u64,
    pub items: u64,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfCfg {
    /// Entities per mode; one namespace per mode.
    pub mode_dims: Vec<u64>,
    pub rank: usize,
}

/// Prior and dynamics parameters for one entity namespace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamespaceCfg {
    /// Every coordinate of the reference-prior mean is set to this value.
    pub pi_fill: f64,
    /// Per-simulation perturbation of the prior mean: each coordinate gets
    /// independent Gaussian noise with standard deviation
    /// `pi_perturb_rel * |pi_fill|`.
    #[serde(default)]
    pub pi_perturb_rel: f64,
    /// The reference-prior covariance is a random positive-definite matrix
    /// rescaled so its trace equals `dim * ref_cov_trace_per_dim`.
    pub ref_cov_trace_per_dim: f64,
    /// Mean-reversion half-life in steps; infinity disables reversion.
    pub half_life_steps: f64,
    /// Innovation covariance is `(1 - alpha^2) * drift_scale * I`.
    pub drift_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditCfg {
    /// Number of candidate contexts per decision (regression runs only; MF
    /// offers all items and TF all last-mode entities).
    pub candidate_set_size: usize,
}

impl Default for BanditCfg {
    fn default() -> Self {
        BanditCfg {
            candidate_set_size: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdagradCfg {
    pub lr: f64,
    pub eps: f64,
    /// Learning rates to sweep when tuning the baseline.
    pub lr_grid: Vec<f64>,
}

impl Default for AdagradCfg {
    fn default() -> Self {
        AdagradCfg {
            lr: 0.1,
            eps: 1e-8,
            lr_grid: vec![0.01, 0.05, 0.1, 0.5],
        }
    }
}

fn default_family() -> String {
    "bernoulli".into()
}

fn default_link() -> String {
    "canonical".into()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub horizon: u64,
    pub n_sims: u64,
    pub seed: u64,
    /// Whether ground truth (and the filter's dynamics) drift over time.
    pub dynamic: bool,
    /// Whether the filter tracks reference vectors (ignored when static).
    #[serde(default = "default_true")]
    pub reference_vectors: bool,
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_link")]
    pub link: String,
    #[serde(default)]
    pub regression: Option<RegressionCfg>,
    #[serde(default)]
    pub mf: Option<MfCfg>,
    #[serde(default)]
    pub tf: Option<TfCfg>,
    pub namespaces: HashMap<String, NamespaceCfg>,
    #[serde(default)]
    pub bandit: BanditCfg,
    #[serde(default)]
    pub adagrad: AdagradCfg,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| DekfError::ConfigError(format!("config does not parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(DekfError::ConfigError("horizon must be at least 1".into()));
        }
        if self.n_sims == 0 {
            return Err(DekfError::ConfigError("n_sims must be at least 1".into()));
        }
        self.family()?;
        match self.model {
            ModelKind::Regression => {
                let r = self.regression.as_ref().ok_or_else(|| {
                    DekfError::ConfigError("model = \"regression\" needs a [regression] table".into())
                })?;
                if r.context_dim == 0 || r.context_pool == 0 {
                    return Err(DekfError::ConfigError(
                        "regression context_dim and context_pool must be positive".into(),
                    ));
                }
            }
            ModelKind::Mf => {
                let m = self.mf.as_ref().ok_or_else(|| {
                    DekfError::ConfigError("model = \"mf\" needs an [mf] table".into())
                })?;
                if m.users == 0 || m.items == 0 || m.rank == 0 {
                    return Err(DekfError::ConfigError(
                        "mf users, items, and rank must be positive".into(),
                    ));
                }
            }
            ModelKind::Tf => {
                let t = self.tf.as_ref().ok_or_else(|| {
                    DekfError::ConfigError("model = \"tf\" needs a [tf] table".into())
                })?;
                if t.mode_dims.len() < 2 {
                    return Err(DekfError::ConfigError(
                        "tf needs at least two modes".into(),
                    ));
                }
                if t.mode_dims.iter().any(|&d| d == 0) || t.rank == 0 {
                    return Err(DekfError::ConfigError(
                        "tf mode_dims entries and rank must be positive".into(),
                    ));
                }
            }
        }
        for ns in self.namespace_names() {
            let cfg = self.namespaces.get(&ns).ok_or_else(|| {
                DekfError::ConfigError(format!("missing [namespaces.{ns}] table"))
            })?;
            if !cfg.pi_fill.is_finite() {
                return Err(DekfError::ConfigError(format!(
                    "namespaces.{ns}.pi_fill must be finite"
                )));
            }
            if !(cfg.pi_perturb_rel >= 0.0) || !cfg.pi_perturb_rel.is_finite() {
                return Err(DekfError::ConfigError(format!(
                    "namespaces.{ns}.pi_perturb_rel must be a finite non-negative number"
                )));
            }
            if !(cfg.ref_cov_trace_per_dim > 0.0) {
                return Err(DekfError::ConfigError(format!(
                    "namespaces.{ns}.ref_cov_trace_per_dim must be positive"
                )));
            }
            // Rejects zero and negative half-lives up front.
            half_life_to_alpha(cfg.half_life_steps)?;
            if !(cfg.drift_scale >= 0.0) || !cfg.drift_scale.is_finite() {
                return Err(DekfError::ConfigError(format!(
                    "namespaces.{ns}.drift_scale must be a finite non-negative number"
                )));
            }
        }
        for ns in self.namespaces.keys() {
            if !self.namespace_names().contains(ns) {
                return Err(DekfError::ConfigError(format!(
                    "[namespaces.{ns}] does not belong to the {:?} model",
                    self.model
                )));
            }
        }
        if self.bandit.candidate_set_size == 0 {
            return Err(DekfError::ConfigError(
                "bandit.candidate_set_size must be positive".into(),
            ));
        }
        if let ModelKind::Regression = self.model {
            let pool = self.regression.as_ref().expect("checked above").context_pool;
            if self.bandit.candidate_set_size > pool {
                return Err(DekfError::ConfigError(format!(
                    "bandit.candidate_set_size ({}) exceeds the context pool ({pool})",
                    self.bandit.candidate_set_size
                )));
            }
        }
        for lr in self.adagrad.lr_grid.iter().chain([&self.adagrad.lr]) {
            if !(*lr > 0.0) || !lr.is_finite() {
                return Err(DekfError::ConfigError(
                    "adagrad learning rates must be positive".into(),
                ));
            }
        }
        if !(self.adagrad.eps > 0.0) {
            return Err(DekfError::ConfigError("adagrad.eps must be positive".into()));
        }
        Ok(())
    }

    /// The observation family, constructed and validated.
    pub fn family(&self) -> Result<Family> {
        let family = match self.family.as_str() {
            "bernoulli" => Family::bernoulli(),
            "poisson" => Family::poisson(),
            "gaussian" => Family::gaussian(nalgebra::DMatrix::identity(1, 1))?,
            other => {
                return Err(DekfError::ConfigError(format!(
                    "unknown family {other:?}: expected bernoulli, poisson, or gaussian"
                )))
            }
        };
        let link = self.link()?;
        expfam::resolve_link(&family, link)?;
        Ok(family)
    }

    pub fn link(&self) -> Result<Link> {
        match self.link.as_str() {
            "canonical" => Ok(Link::Canonical),
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            "logit" => Ok(Link::Logit),
            other => Err(DekfError::ConfigError(format!(
                "unknown link {other:?}: expected canonical, identity, log, or logit"
            ))),
        }
    }

    /// Entity namespaces the model uses, in a fixed order.
    pub fn namespace_names(&self) -> Vec<String> {
        match self.model {
            ModelKind::Regression => vec!["theta".to_string()],
            ModelKind::Mf => vec!["user".to_string(), "item".to_string()],
            ModelKind::Tf => {
                let modes = self.tf.as_ref().map_or(0, |t| t.mode_dims.len());
                (0..modes).map(|m| format!("mode{m}")).collect()
            }
        }
    }

    /// Number of entities in a namespace.
    pub fn namespace_size(&self, ns: &str) -> u64 {
        match self.model {
            ModelKind::Regression => 1,
            ModelKind::Mf => {
                let m = self.mf.as_ref().expect("validated");
                if ns == "user" {
                    m.users
                } else {
                    m.items
                }
            }
            ModelKind::Tf => {
                let t = self.tf.as_ref().expect("validated");
                let idx: usize = ns.strip_prefix("mode").and_then(|s| s.parse().ok()).expect("validated");
                t.mode_dims[idx]
            }
        }
    }

    /// Parameter dimension of entities in a namespace.
    pub fn entity_dim(&self, ns: &str) -> usize {
        let _ = ns;
        match self.model {
            ModelKind::Regression => self.regression.as_ref().expect("validated").context_dim,
            ModelKind::Mf => self.mf.as_ref().expect("validated").rank,
            ModelKind::Tf => self.tf.as_ref().expect("validated").rank,
        }
    }

    /// Every entity the experiment can touch, namespace by namespace.
    pub fn all_entities(&self) -> Vec<EntityId> {
        let mut out = Vec::new();
        for ns in self.namespace_names() {
            for idx in 0..self.namespace_size(&ns) {
                out.push(EntityId::new(&ns, idx));
            }
        }
        out
    }

    /// The signal model the config describes.
    pub fn signal_model(&self) -> Result<SignalModel> {
        match self.model {
            ModelKind::Regression => {
                let r = self.regression.as_ref().expect("validated");
                SignalModel::glm(vec![(EntityId::new("theta", 0), r.context_dim)])
            }
            ModelKind::Mf => {
                let m = self.mf.as_ref().expect("validated");
                SignalModel::mf("user", "item", m.rank)
            }
            ModelKind::Tf => {
                let t = self.tf.as_ref().expect("validated");
                SignalModel::tf(self.namespace_names(), t.rank)
            }
        }
    }

    /// Per-step mean-reversion factor for a namespace.
    pub fn alpha(&self, ns: &str) -> Result<f64> {
        let cfg = self.namespaces.get(ns).ok_or_else(|| {
            DekfError::ConfigError(format!("missing [namespaces.{ns}] table"))
        })?;
        half_life_to_alpha(cfg.half_life_steps)
    }

    pub fn namespace(&self, ns: &str) -> &NamespaceCfg {
        self.namespaces.get(ns).expect("validated")
    }

    /// True when the generators can emit this config's observations: binary
    /// draws for Bernoulli, unit-variance normal draws for Gaussian. Poisson
    /// streams are not generated (counts would routinely overflow the
    /// canonical rate early in a run, before the filter has locked on).
    pub fn simulable(&self) -> Result<()> {
        let family = self.family()?;
        match family.kind() {
            FamilyKind::Bernoulli | FamilyKind::Gaussian => Ok(()),
            FamilyKind::Poisson => Err(DekfError::ConfigError(format!(
                "stream generation supports bernoulli and gaussian families; {:?} is not simulable",
                self.family
            ))),
        }
    }
}

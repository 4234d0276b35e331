//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear at
//! most once and unknown keys are rejected. `seed` sets both the data and the
//! training seed; a later `data_seed` overrides the former.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerKind, Schedule, TrainConfig};
use crate::error::{PasclError, Result};
use crate::synth::DataGenConfig;

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataGenConfig,
    pub train: TrainConfig,
}

/// Recognized keys in canonical order.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "data_seed",
    "classes",
    "n_max",
    "rho",
    "k",
    "dim",
    "id_center_radius",
    "id_cluster_std",
    "n_ood_clusters",
    "ood_cluster_std",
    "n_ood_train",
    "n_test_per_class",
    "n_ood_test",
    "n1",
    "n2",
    "optimizer",
    "lr1",
    "lr2",
    "schedule",
    "batch_in",
    "batch_out",
    "lambda1",
    "lambda2",
    "tau",
    "tau_la",
    "variant",
    "score",
    "width",
    "depth",
    "proj_dim",
    "bn_eps",
    "bn_momentum",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| PasclError::Config(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    /// Parses a config file on top of the defaults and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PasclError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(PasclError::Config(format!("{key}: given more than once")));
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (d, t) = (&mut self.data, &mut self.train);
        match key {
            "seed" => {
                d.seed = parse(key, value)?;
                t.seed = d.seed;
            }
            "data_seed" => d.seed = parse(key, value)?,
            "classes" => d.classes = parse(key, value)?,
            "n_max" => d.n_max = parse(key, value)?,
            "rho" => d.rho = parse(key, value)?,
            "k" => d.tail_fraction = parse(key, value)?,
            "dim" => d.dim = parse(key, value)?,
            "id_center_radius" => d.id_center_radius = parse(key, value)?,
            "id_cluster_std" => d.id_cluster_std = parse(key, value)?,
            "n_ood_clusters" => d.n_ood_clusters = parse(key, value)?,
            "ood_cluster_std" => d.ood_cluster_std = parse(key, value)?,
            "n_ood_train" => d.n_ood_train = parse(key, value)?,
            "n_test_per_class" => d.n_test_per_class = parse(key, value)?,
            "n_ood_test" => d.n_ood_test = parse(key, value)?,
            "n1" => t.n1 = parse(key, value)?,
            "n2" => t.n2 = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse()?,
            "lr1" => t.lr1 = parse(key, value)?,
            "lr2" => t.lr2 = parse(key, value)?,
            "schedule" => t.schedule = value.parse()?,
            "batch_in" => t.batch_in = parse(key, value)?,
            "batch_out" => t.batch_out = parse(key, value)?,
            "lambda1" => t.weights.lambda1 = parse(key, value)?,
            "lambda2" => t.weights.lambda2 = parse(key, value)?,
            "tau" => t.weights.tau = parse(key, value)?,
            "tau_la" => t.weights.tau_la = parse(key, value)?,
            "variant" => t.variant = value.parse()?,
            "score" => t.score_fn = value.parse()?,
            "width" => t.width = parse(key, value)?,
            "depth" => t.depth = parse(key, value)?,
            "proj_dim" => t.proj_dim = parse(key, value)?,
            "bn_eps" => t.bn_eps = parse(key, value)?,
            "bn_momentum" => t.bn_momentum = parse(key, value)?,
            _ => return Err(PasclError::Config(format!("{key}: unknown key"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (d, t) = (&self.data, &self.train);
        let v = match key {
            "seed" => t.seed.to_string(),
            "data_seed" => d.seed.to_string(),
            "classes" => d.classes.to_string(),
            "n_max" => d.n_max.to_string(),
            "rho" => d.rho.to_string(),
            "k" => d.tail_fraction.to_string(),
            "dim" => d.dim.to_string(),
            "id_center_radius" => d.id_center_radius.to_string(),
            "id_cluster_std" => d.id_cluster_std.to_string(),
            "n_ood_clusters" => d.n_ood_clusters.to_string(),
            "ood_cluster_std" => d.ood_cluster_std.to_string(),
            "n_ood_train" => d.n_ood_train.to_string(),
            "n_test_per_class" => d.n_test_per_class.to_string(),
            "n_ood_test" => d.n_ood_test.to_string(),
            "n1" => t.n1.to_string(),
            "n2" => t.n2.to_string(),
            "optimizer" => t.optimizer.as_str().into(),
            "lr1" => t.lr1.to_string(),
            "lr2" => t.lr2.to_string(),
            "schedule" => t.schedule.as_str().into(),
            "batch_in" => t.batch_in.to_string(),
            "batch_out" => t.batch_out.to_string(),
            "lambda1" => t.weights.lambda1.to_string(),
            "lambda2" => t.weights.lambda2.to_string(),
            "tau" => t.weights.tau.to_string(),
            "tau_la" => t.weights.tau_la.to_string(),
            "variant" => t.variant.as_str().into(),
            "score" => t.score_fn.as_str().into(),
            "width" => t.width.to_string(),
            "depth" => t.depth.to_string(),
            "proj_dim" => t.proj_dim.to_string(),
            "bn_eps" => t.bn_eps.to_string(),
            "bn_momentum" => t.bn_momentum.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Canonical rendering: every key in [`CONFIG_KEYS`] order. Parsing it back
    /// gives an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`ExperimentConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()
    }
}

impl FromStr for OptimizerKind {
    type Err = PasclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(PasclError::Config(format!("optimizer: unknown optimizer {s:?}"))),
        }
    }
}

impl FromStr for Schedule {
    type Err = PasclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "step" => Ok(Schedule::Step),
            "constant" => Ok(Schedule::Constant),
            _ => Err(PasclError::Config(format!("schedule: unknown schedule {s:?}"))),
        }
    }
}

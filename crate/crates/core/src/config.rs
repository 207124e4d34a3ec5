//! Experiment configuration: a flat TOML key/value file.
//!
//! `seed`, `dataset` and `partition` are required; everything else has a
//! default. [`ExperimentConfig::default_text`] renders the full default file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::lora::LedgerMode;
use crate::protomodel::{Activation, HyperParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Quantity,
    Dirichlet,
}

/// Server-side prototype aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Reweight,
    Uniform,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Reweight => "reweight",
            Aggregation::Uniform => "uniform",
        })
    }
}

/// Which prototypes the training softmax ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxScope {
    #[default]
    Current,
    Seen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyBy {
    #[default]
    Prototypes,
    CrossEntropyHead,
}

fn d_num_classes() -> usize {
    20
}
fn d_input_dim() -> usize {
    32
}
fn d_per_class() -> usize {
    100
}
fn d_center_scale() -> f64 {
    1.0
}
fn d_noise() -> f64 {
    0.5
}
fn d_test_fraction() -> f64 {
    0.2
}
fn d_tasks() -> usize {
    5
}
fn d_clients() -> usize {
    10
}
fn d_alpha() -> usize {
    2
}
fn d_beta() -> f64 {
    0.5
}
fn d_feature_dim() -> usize {
    32
}
fn d_depth() -> usize {
    2
}
fn d_attach() -> Vec<usize> {
    vec![0]
}
fn d_output() -> PathBuf {
    PathBuf::from("runs/default")
}
fn d_true() -> bool {
    true
}

macro_rules! hp_default {
    ($name:ident, $field:ident, $ty:ty) => {
        fn $name() -> $ty {
            HyperParams::default().$field
        }
    };
}
hp_default!(d_delta, delta, f64);
hp_default!(d_lambda, lambda, f64);
hp_default!(d_gamma, gamma, f64);
hp_default!(d_eta, eta, f64);
hp_default!(d_rank, rank, usize);
hp_default!(d_lr_p, lr_prototypes, f64);
hp_default!(d_lr_l, lr_lora, f64);
hp_default!(d_epochs, local_epochs, usize);
hp_default!(d_rounds, rounds, usize);
hp_default!(d_batch, batch_size, usize);
hp_default!(d_init, init_stddev, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub dataset: DatasetKind,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_center_scale")]
    pub center_scale: f64,
    #[serde(default = "d_noise")]
    pub noise_stddev: f64,
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,

    #[serde(default = "d_tasks")]
    pub tasks: usize,
    #[serde(default = "d_clients")]
    pub clients: usize,
    pub partition: PartitionKind,
    #[serde(default = "d_alpha")]
    pub alpha: usize,
    #[serde(default = "d_beta")]
    pub beta: f64,

    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_rank")]
    pub rank: usize,
    #[serde(default = "d_lr_p")]
    pub lr_prototypes: f64,
    #[serde(default = "d_lr_l")]
    pub lr_lora: f64,
    #[serde(default = "d_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_init")]
    pub init_stddev: f64,

    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "d_attach")]
    pub attach_layers: Vec<usize>,

    #[serde(default)]
    pub ledger_mode: LedgerMode,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub freeze_all: bool,
    #[serde(default)]
    pub classify_by: ClassifyBy,
    #[serde(default)]
    pub softmax_scope: SoftmaxScope,

    #[serde(default)]
    pub parallel_clients: bool,
    #[serde(default = "d_true")]
    pub write_checkpoints: bool,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Default configuration for a synthetic run with the given seed.
    pub fn synthetic(seed: u64) -> Self {
        Self::from_toml(&format!(
            "seed = {seed}\ndataset = \"synthetic\"\npartition = \"quantity\"\n"
        ))
        .expect("built-in defaults are valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides, with `value` in TOML syntax (bare words
    /// are taken as strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let key = key.trim().replace('-', "_");
            let raw = raw.trim();
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key, value);
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            delta: self.delta,
            lambda: self.lambda,
            gamma: self.gamma,
            eta: self.eta,
            rank: self.rank,
            lr_prototypes: self.lr_prototypes,
            lr_lora: self.lr_lora,
            local_epochs: self.local_epochs,
            rounds: self.rounds,
            batch_size: self.batch_size,
            init_stddev: self.init_stddev,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let mode = match self.partition {
            PartitionKind::Quantity => PartitionMode::Quantity { alpha: self.alpha },
            PartitionKind::Dirichlet => PartitionMode::Dirichlet { beta: self.beta },
        };
        PartitionSpec {
            mode,
            num_clients: self.clients,
            seed: crate::numkit::derive_seed(self.seed, "partition", &[]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        self.hyper_params().validate()?;
        if self.classify_by == ClassifyBy::CrossEntropyHead {
            return bad(
                "classify_by",
                "cross_entropy_head is not supported; only prototypes".into(),
            );
        }
        match self.dataset {
            DatasetKind::Csv => {
                if self.csv_path.is_none() {
                    return bad("csv_path", "required when dataset = \"csv\"".into());
                }
            }
            DatasetKind::Synthetic => {
                if self.num_classes == 0 {
                    return bad("num_classes", "must be >= 1".into());
                }
                if self.input_dim == 0 {
                    return bad("input_dim", "must be >= 1".into());
                }
                if self.per_class == 0 {
                    return bad("per_class", "must be >= 1".into());
                }
                if !(self.center_scale.is_finite() && self.center_scale >= 0.0) {
                    return bad("center_scale", "must be finite and >= 0".into());
                }
                if !(self.noise_stddev.is_finite() && self.noise_stddev >= 0.0) {
                    return bad("noise_stddev", "must be finite and >= 0".into());
                }
                if self.tasks == 0 || !self.num_classes.is_multiple_of(self.tasks) {
                    return bad(
                        "tasks",
                        format!("must divide num_classes = {}", self.num_classes),
                    );
                }
                let per_task = self.num_classes / self.tasks;
                if self.partition == PartitionKind::Quantity {
                    if self.alpha == 0 || self.alpha > per_task {
                        return bad("alpha", format!("must be in 1..={per_task}"));
                    }
                    if self.alpha * self.clients < per_task {
                        return bad(
                            "alpha",
                            format!(
                                "{} clients x alpha {} cannot cover {per_task} classes per task",
                                self.clients, self.alpha
                            ),
                        );
                    }
                }
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction", "must be in [0, 1)".into());
        }
        if self.tasks == 0 {
            return bad("tasks", "must be >= 1".into());
        }
        self.partition_spec().validate()?;
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be >= 1".into());
        }
        if self.depth == 0 {
            return bad("depth", "must be >= 1".into());
        }
        if let Some(&l) = self.attach_layers.iter().find(|&&l| l >= self.depth) {
            return bad("attach_layers", format!("layer {l} >= depth {}", self.depth));
        }
        if !self.freeze_all {
            for &l in &self.attach_layers {
                let fan_in = if l == 0 { self.input_dim } else { self.feature_dim };
                if self.dataset == DatasetKind::Synthetic
                    && self.rank > fan_in.min(self.feature_dim)
                {
                    return bad("rank", format!("exceeds the dimensions of layer {l}"));
                }
            }
        }
        Ok(())
    }

    /// Commented default file; `seed`, `dataset` and `partition` are filled in.
    pub fn default_text() -> String {
        let cfg = Self::synthetic(0);
        let mut out = String::from(
            "# Experiment configuration. Flat key = value (TOML).\n\
             # Required: seed, dataset (synthetic | csv), partition (quantity | dirichlet).\n\
             # Learning rates are per optimizer step; dims are counts.\n",
        );
        out.push_str(&cfg.to_toml());
        let _ = writeln!(out, "# csv_path = \"features.csv\"  # label,f1,f2,... per row");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = ExperimentConfig::synthetic(3);
        assert_eq!(c.delta, 1.0);
        assert_eq!(c.lambda, 0.001);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.eta, 0.2);
        assert_eq!(c.rank, 4);
        assert_eq!(c.local_epochs, 5);
        assert_eq!(c.rounds, 30);
        assert_eq!(c.clients, 10);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lr_prototypes, 2e-3);
        assert_eq!(c.lr_lora, 1e-5);
        assert_eq!(c.attach_layers, vec![0]);
    }

    #[test]
    fn missing_required_field_is_named() {
        let err = ExperimentConfig::from_toml("dataset = \"synthetic\"\npartition = \"quantity\"\n")
            .unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = ExperimentConfig::from_toml("seed = 1\ndataset = \"synthetic\"\n").unwrap_err();
        assert!(err.to_string().contains("partition"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected_by_field() {
        let base = ExperimentConfig::synthetic(1);
        let e = base.with_overrides(&["eta=0".into()]).unwrap_err();
        assert!(e.to_string().contains("eta"), "{e}");
        let e = base.with_overrides(&["tasks=3".into()]).unwrap_err();
        assert!(e.to_string().contains("tasks"), "{e}");
        let e = base
            .with_overrides(&["classify_by=cross_entropy_head".into()])
            .unwrap_err();
        assert!(e.to_string().contains("classify_by"), "{e}");
        let e = base.with_overrides(&["bogus=1".into()]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn overrides_and_round_trip() {
        let base = ExperimentConfig::synthetic(1);
        let c = base
            .with_overrides(&[
                "gamma=0".into(),
                "aggregation=uniform".into(),
                "attach_layers=[0, 1]".into(),
            ])
            .unwrap();
        assert_eq!(c.gamma, 0.0);
        assert_eq!(c.aggregation, Aggregation::Uniform);
        assert_eq!(c.attach_layers, vec![0, 1]);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), c);
    }

    #[test]
    fn default_text_parses() {
        let c = ExperimentConfig::from_toml(&ExperimentConfig::default_text()).unwrap();
        assert_eq!(c, ExperimentConfig::synthetic(0));
    }
}

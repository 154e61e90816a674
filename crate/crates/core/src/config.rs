//! Experiment configuration: a TOML document whose every field can be
//! overridden with dotted `key=value` pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Concentration, Dataset};
use crate::error::{invalid, FalError, Result};
use crate::federation::FedConfig;
use crate::metrics::EmdNorm;
use crate::model::{Architecture, TrainConfig};
use crate::strategies::QuerySpec;

pub const OUTPUT_ROOT_ENV: &str = "FAL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "defaults::num_classes")]
        num_classes: usize,
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_classes: defaults::num_classes(),
            per_class: defaults::per_class(),
            test_per_class: defaults::test_per_class(),
            dim: defaults::dim(),
            separation: defaults::separation(),
            seed: 0,
        }
    }
}

mod defaults {
    pub fn num_classes() -> usize {
        5
    }
    pub fn per_class() -> usize {
        400
    }
    pub fn test_per_class() -> usize {
        200
    }
    pub fn dim() -> usize {
        8
    }
    pub fn separation() -> f64 {
        2.5
    }
}

impl DatasetSpec {
    /// `(train, test)`
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            DatasetSpec::Synthetic {
                num_classes,
                per_class,
                test_per_class,
                dim,
                separation,
                seed,
            } => (
                data::generate_synthetic(*num_classes, *per_class, *dim, *separation, *seed)?,
                data::generate_synthetic_test(*num_classes, *test_per_class, *dim, *separation, *seed)?,
            ),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                data::load_idx(train_images, train_labels)?,
                data::load_idx(test_images, test_labels)?,
            ),
            DatasetSpec::Csv { train, test } => (data::load_csv(train)?, data::load_csv(test)?),
        };
        if train.dim() != test.dim() {
            return Err(FalError::ShapeMismatch {
                expected: train.dim(),
                actual: test.dim(),
            });
        }
        let classes = train.num_classes.max(test.num_classes);
        let widen = |d: Dataset| Dataset { num_classes: classes, ..d };
        Ok((widen(train), widen(test)))
    }

    pub fn short_name(&self) -> String {
        match self {
            DatasetSpec::Synthetic { num_classes, dim, .. } => format!("syn{num_classes}x{dim}"),
            DatasetSpec::Idx { train_images, .. } => stem(train_images),
            DatasetSpec::Csv { train, .. } => stem(train),
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSection {
    pub num_clients: usize,
    pub alpha: Concentration,
    pub rho: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            num_clients: 5,
            alpha: Concentration::Finite(0.1),
            rho: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalOnlySection {
    pub epochs: usize,
    pub early_stop_train_acc: f64,
}

impl Default for LocalOnlySection {
    fn default() -> Self {
        Self {
            epochs: 50,
            early_stop_train_acc: 0.99,
        }
    }
}

/// Per-round labeling budget: an absolute count or a fraction of the
/// per-client pool (floored, at least 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    pub fn per_round(&self, pool: usize) -> usize {
        match *self {
            Budget::Count(n) => n,
            Budget::Fraction(f) => ((f * pool as f64).floor() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyMode {
    /// Test accuracy of the final FedAvg model.
    #[default]
    Final,
    /// Mean test accuracy over the last five FL rounds.
    Last5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Setting name used to group results; derived from the config when absent.
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub federation: FedConfig,
    pub local_only: LocalOnlySection,
    pub query: QuerySpec,
    pub budget: Budget,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub accuracy: AccuracyMode,
    pub emd_norm: EmdNorm,
    pub output_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            dataset: DatasetSpec::default(),
            partition: PartitionSection::default(),
            model: ModelSection::default(),
            federation: FedConfig::default(),
            local_only: LocalOnlySection::default(),
            query: QuerySpec::default(),
            budget: Budget::Fraction(0.05),
            rounds: 5,
            seeds: vec![0, 1, 2, 3],
            accuracy: AccuracyMode::Final,
            emd_norm: EmdNorm::TotalVariation,
            output_dir: None,
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        match self.budget {
            Budget::Count(0) => return Err(invalid("budget must be >= 1")),
            Budget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(invalid("budget fraction must lie in (0, 1]"))
            }
            _ => {}
        }
        if self.partition.num_clients < 2 {
            return Err(invalid("at least 2 clients are required"));
        }
        if !self.partition.alpha.is_valid() || !(self.partition.rho >= 1.0) {
            return Err(invalid("alpha must be positive and rho >= 1"));
        }
        self.federation.validate()
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Result<Architecture> {
        Architecture::new(input_dim, self.model.hidden.clone(), num_classes)
    }

    pub fn local_only_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.local_only.epochs,
            early_stop_train_acc: Some(self.local_only.early_stop_train_acc),
            ..self.federation.train.clone()
        }
    }

    /// Name of the experimental setting (everything except the strategy).
    pub fn setting(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let init = match self.federation.init_mode {
                crate::federation::InitMode::Random => "random",
                crate::federation::InitMode::Continue => "continue",
            };
            let budget = match self.budget {
                Budget::Count(n) => format!("{n}"),
                Budget::Fraction(f) => format!("{f}"),
            };
            format!(
                "{}-a{}-r{}-b{}-{}",
                self.dataset.short_name(),
                self.partition.alpha,
                self.partition.rho,
                budget,
                init
            )
        })
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| FalError::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut doc, k, v)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| FalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FalError::Config(e.to_string()))
    }

    /// Output directory, re-rooted under `$FAL_OUTPUT_ROOT` when set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        let relative = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{}__{}", self.setting(), self.query.label())));
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if relative.is_relative() => PathBuf::from(root).join(relative),
            Some(root) => PathBuf::from(root).join(relative.file_name().unwrap_or_default()),
            None if relative.is_relative() && self.output_dir.is_none() => PathBuf::from("results").join(relative),
            None => relative,
        }
    }
}

/// Parses `--a.b.c=value` style arguments into `(key, value)` pairs.
pub fn parse_overrides<I, S>(args: I) -> Result<Vec<(String, String)>>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    args.into_iter()
        .map(|a| {
            let a = a.as_ref();
            let body = a
                .strip_prefix("--")
                .ok_or_else(|| FalError::Config(format!("override {a:?} must look like --key=value")))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| FalError::Config(format!("override {a:?} is missing '='")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

fn parse_scalar(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("probe key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(FalError::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| FalError::Config(format!("{key:?}: {part:?} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

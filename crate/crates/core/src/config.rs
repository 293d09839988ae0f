//! Flat `key = value` experiment configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, then
//! command-line overrides. Unknown keys are rejected. Lines starting with
//! `#` and blank lines are ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{AugmentParams, Dataset, ALLOWED_DIVISORS};
use crate::network::NetworkSpec;
use crate::optim::{AdamConfig, CgBeta, CgConfig, LineSearchMode, ScheduleFamily, ScheduleSpec};

/// Every accepted key with its default and meaning.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    (
        "dataset.kind",
        "synthetic",
        "synthetic | mnist | cifar10 | cifar100",
    ),
    ("dataset.path", "", "directory holding the dataset files"),
    (
        "dataset.augment",
        "false",
        "tenfold augmentation of the training set",
    ),
    ("dataset.synth.k", "4096", "synthetic training examples"),
    (
        "dataset.synth.validation_k",
        "1024",
        "synthetic validation examples",
    ),
    ("dataset.synth.classes", "10", "synthetic class count"),
    ("dataset.synth.height", "8", "synthetic image height"),
    ("dataset.synth.width", "8", "synthetic image width"),
    ("dataset.synth.channels", "1", "synthetic image channels"),
    (
        "dataset.synth.difficulty",
        "0.5",
        "noise standard deviation around the class templates",
    ),
    ("dataset.synth.seed", "1", "synthetic data seed"),
    (
        "augment.rotation_degrees",
        "15",
        "maximum absolute rotation",
    ),
    (
        "augment.shift_fraction",
        "0.1",
        "maximum shift as a fraction of each extent",
    ),
    ("augment.contrast_low", "0.8", "lowest contrast scale"),
    ("augment.contrast_high", "1.2", "highest contrast scale"),
    ("augment.seed", "7", "augmentation seed"),
    (
        "model.conv_filters",
        "32,64,64",
        "filters per 3x3 conv + 2x2 pool stage",
    ),
    (
        "model.hidden_units",
        "64",
        "ReLU dense units before the output layer (0 = none)",
    ),
    ("optimizer.kind", "adam", "sgd | adam | cg"),
    ("optimizer.adam.c", "0.001", "Adam step scale"),
    ("optimizer.adam.beta1", "0.9", "first-moment decay"),
    ("optimizer.adam.beta2", "0.999", "second-moment decay"),
    ("optimizer.adam.epsilon", "1e-7", "denominator stabilizer"),
    (
        "optimizer.schedule.family",
        "constant",
        "SGD schedule: constant | power",
    ),
    ("optimizer.schedule.a", "0.01", "SGD schedule scale"),
    (
        "optimizer.schedule.p",
        "0",
        "SGD schedule exponent (c_t = a / t^p)",
    ),
    (
        "optimizer.cg.beta",
        "polak-ribiere",
        "polak-ribiere | fletcher-reeves",
    ),
    ("optimizer.cg.line_search", "armijo", "armijo | exact"),
    (
        "optimizer.cg.initial_step",
        "1.0",
        "first trial step length after a restart",
    ),
    (
        "optimizer.cg.restart_every",
        "0",
        "restart period in iterations (0 = P)",
    ),
    (
        "protocol.b_values",
        "2,4,8,16,32,64,128",
        "subset divisors; the b=1 baseline always runs",
    ),
    ("protocol.epochs_pre", "1000", "subset pretraining epochs"),
    (
        "protocol.epochs_ft",
        "100",
        "fine-tuning epochs on the whole training set",
    ),
    (
        "protocol.batch_size",
        "full",
        "mini-batch size, or full for one exact gradient per epoch",
    ),
    ("protocol.max_runs", "5", "subsets executed per b at most"),
    (
        "protocol.seed",
        "0",
        "master seed: initialization, partition, batch order",
    ),
    ("output.dir", "out", "artifact directory"),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

/// Resolved key/value pairs: every schema key present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        Self {
            values: SCHEMA
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl ConfigMap {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    /// Applies `key=value` text.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: pair.to_string(),
        })?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut map = Self::default();
        map.apply_text(&text)?;
        Ok(map)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Sorted `key = value` lines; the input of [`ConfigMap::hash`].
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse()
            .map_err(|e: T::Err| invalid(key, v, e.to_string()))
    }

    fn parse_list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e: std::num::ParseIntError| invalid(key, v, e.to_string()))
            })
            .collect()
    }

    fn parse_bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(invalid(key, v, "expected true or false")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        train: usize,
        validation: usize,
        classes: usize,
        height: usize,
        width: usize,
        channels: usize,
        difficulty: f64,
        seed: u64,
    },
    /// Directory with `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
    Mnist(PathBuf),
    /// Directory with `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10(PathBuf),
    /// Directory with `train.bin` and `test.bin` (fine labels).
    Cifar100(PathBuf),
}

impl DatasetSource {
    /// Nominal `(K, H, W, C, M)` of the training split, before augmentation.
    pub fn nominal_dims(&self) -> (usize, usize, usize, usize, usize) {
        match *self {
            DatasetSource::Synthetic {
                train,
                classes,
                height,
                width,
                channels,
                ..
            } => (train, height, width, channels, classes),
            DatasetSource::Mnist(_) => (60_000, 28, 28, 1, 10),
            DatasetSource::Cifar10(_) => (50_000, 32, 32, 3, 10),
            DatasetSource::Cifar100(_) => (50_000, 32, 32, 3, 100),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerConfig {
    Sgd(ScheduleSpec),
    Adam(AdamConfig),
    Cg(CgConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub augment: Option<(AugmentParams, u64)>,
    pub conv_filters: Vec<usize>,
    pub hidden_units: usize,
    pub optimizer: OptimizerConfig,
    /// Subset divisors excluding the baseline, ascending and deduplicated.
    pub b_values: Vec<usize>,
    pub epochs_pre: usize,
    pub epochs_ft: usize,
    /// `None` means full-batch.
    pub batch_size: Option<usize>,
    pub max_runs: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Canonical resolved text and its hash, for the manifest.
    pub canonical: String,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let path = PathBuf::from(map.get("dataset.path"));
        let kind = map.get("dataset.kind");
        let dataset = match kind {
            "synthetic" => DatasetSource::Synthetic {
                train: map.parse("dataset.synth.k")?,
                validation: map.parse("dataset.synth.validation_k")?,
                classes: map.parse("dataset.synth.classes")?,
                height: map.parse("dataset.synth.height")?,
                width: map.parse("dataset.synth.width")?,
                channels: map.parse("dataset.synth.channels")?,
                difficulty: map.parse("dataset.synth.difficulty")?,
                seed: map.parse("dataset.synth.seed")?,
            },
            "mnist" => DatasetSource::Mnist(path),
            "cifar10" => DatasetSource::Cifar10(path),
            "cifar100" => DatasetSource::Cifar100(path),
            other => return Err(invalid("dataset.kind", other, "unknown dataset kind")),
        };
        let augment = if map.parse_bool("dataset.augment")? {
            let params = AugmentParams {
                rotation_max_degrees: map.parse("augment.rotation_degrees")?,
                shift_max_fraction: map.parse("augment.shift_fraction")?,
                contrast_range: (
                    map.parse("augment.contrast_low")?,
                    map.parse("augment.contrast_high")?,
                ),
                copies_per_image: 9,
            };
            Some((params, map.parse("augment.seed")?))
        } else {
            None
        };

        let batch_size = match map.get("protocol.batch_size") {
            "full" | "0" => None,
            v => Some(
                v.parse::<usize>()
                    .map_err(|e| invalid("protocol.batch_size", v, e.to_string()))?,
            ),
        };

        let optimizer = match map.get("optimizer.kind") {
            "sgd" => {
                let family = match map.get("optimizer.schedule.family") {
                    "constant" => ScheduleFamily::Constant,
                    "power" => ScheduleFamily::Power,
                    v => return Err(invalid("optimizer.schedule.family", v, "constant or power")),
                };
                let s = ScheduleSpec {
                    family,
                    a: map.parse("optimizer.schedule.a")?,
                    p: map.parse("optimizer.schedule.p")?,
                };
                s.validate()
                    .map_err(|e| invalid("optimizer.schedule", &format!("{s:?}"), e.to_string()))?;
                OptimizerConfig::Sgd(s)
            }
            "adam" => {
                let a = AdamConfig {
                    c: map.parse("optimizer.adam.c")?,
                    beta1: map.parse("optimizer.adam.beta1")?,
                    beta2: map.parse("optimizer.adam.beta2")?,
                    epsilon: map.parse("optimizer.adam.epsilon")?,
                };
                a.validate()
                    .map_err(|e| invalid("optimizer.adam", &format!("{a:?}"), e.to_string()))?;
                OptimizerConfig::Adam(a)
            }
            "cg" => {
                if batch_size.is_some() {
                    return Err(invalid(
                        "protocol.batch_size",
                        map.get("protocol.batch_size"),
                        "conjugate gradient needs full-batch losses",
                    ));
                }
                let beta = match map.get("optimizer.cg.beta") {
                    "polak-ribiere" => CgBeta::PolakRibierePlus,
                    "fletcher-reeves" => CgBeta::FletcherReeves,
                    v => {
                        return Err(invalid(
                            "optimizer.cg.beta",
                            v,
                            "polak-ribiere or fletcher-reeves",
                        ))
                    }
                };
                let line_search = match map.get("optimizer.cg.line_search") {
                    "armijo" => LineSearchMode::Armijo,
                    "exact" => LineSearchMode::Exact,
                    v => return Err(invalid("optimizer.cg.line_search", v, "armijo or exact")),
                };
                let initial_step: f64 = map.parse("optimizer.cg.initial_step")?;
                if !(initial_step > 0.0 && initial_step.is_finite()) {
                    return Err(invalid(
                        "optimizer.cg.initial_step",
                        map.get("optimizer.cg.initial_step"),
                        "must be positive",
                    ));
                }
                let restart: usize = map.parse("optimizer.cg.restart_every")?;
                OptimizerConfig::Cg(CgConfig {
                    beta,
                    line_search,
                    restart_every: (restart > 0).then_some(restart),
                    initial_step,
                    ..CgConfig::default()
                })
            }
            v => return Err(invalid("optimizer.kind", v, "sgd, adam, or cg")),
        };

        let mut b_values = map.parse_list("protocol.b_values")?;
        if let Some(&bad) = b_values.iter().find(|b| !ALLOWED_DIVISORS.contains(b)) {
            return Err(invalid(
                "protocol.b_values",
                map.get("protocol.b_values"),
                format!("{bad} is not one of 1, 2, 4, 8, 16, 32, 64, 128"),
            ));
        }
        b_values.retain(|&b| b != 1);
        b_values.sort_unstable();
        b_values.dedup();

        let max_runs: usize = map.parse("protocol.max_runs")?;
        if max_runs == 0 {
            return Err(invalid("protocol.max_runs", "0", "must be positive"));
        }
        if batch_size == Some(0) {
            return Err(invalid("protocol.batch_size", "0", "must be positive"));
        }

        let conv_filters = map.parse_list("model.conv_filters")?;
        let cfg = Self {
            dataset,
            augment,
            conv_filters,
            hidden_units: map.parse("model.hidden_units")?,
            optimizer,
            b_values,
            epochs_pre: map.parse("protocol.epochs_pre")?,
            epochs_ft: map.parse("protocol.epochs_ft")?,
            batch_size,
            max_runs,
            master_seed: map.parse("protocol.seed")?,
            output_dir: PathBuf::from(map.get("output.dir")),
            canonical: map.canonical(),
            hash: map.hash(),
        };
        cfg.network_spec()
            .validate()
            .map_err(|e| invalid("model", map.get("model.conv_filters"), e.to_string()))?;
        Ok(cfg)
    }

    /// Training examples after optional augmentation, `(K, M)`.
    pub fn nominal_k_m(&self) -> (usize, usize) {
        let (k, _, _, _, m) = self.dataset.nominal_dims();
        let factor = self
            .augment
            .as_ref()
            .map_or(1, |(p, _)| p.copies_per_image + 1);
        (k * factor, m)
    }

    /// Network for the nominal input shape and class count.
    pub fn network_spec(&self) -> NetworkSpec {
        let (_, h, w, c, m) = self.dataset.nominal_dims();
        self.network_spec_with((h, w, c), m)
    }

    /// Network for data actually loaded, which may differ from the nominal
    /// dimensions (for example IDX files written by `synth`).
    pub fn network_spec_for(&self, data: &Dataset) -> NetworkSpec {
        self.network_spec_with(data.image_shape(), data.class_count)
    }

    fn network_spec_with(&self, input_shape: (usize, usize, usize), m: usize) -> NetworkSpec {
        NetworkSpec {
            input_shape,
            conv_filters: self.conv_filters.clone(),
            hidden_units: self.hidden_units,
            class_count: m,
            master_seed: self.master_seed,
        }
    }
}

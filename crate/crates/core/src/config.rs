//! The run configuration file (TOML): everything that determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, ImageSet, CIFAR10_DIMS, VALIDATION_SIZE};
use crate::error::{Error, Result};
use crate::models::EncoderConfig;
use crate::protocols::ProtocolSpec;
use crate::training::TrainConfig;

/// Environment variable naming the dataset root when the file leaves it out.
pub const DATA_ENV: &str = "RELAY_JSCC_DATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Cifar10,
    /// Generated smooth colour fields; needs no files.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Directory holding the CIFAR-10 archive; falls back to `$RELAY_JSCC_DATA`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default = "default_validation")]
    pub validation_size: usize,
    /// Train on a seeded subset of this many images (after the carve-out).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    /// Images generated for the synthetic training and test sets.
    #[serde(default = "default_synthetic_train")]
    pub synthetic_train: usize,
    #[serde(default = "default_synthetic_test")]
    pub synthetic_test: usize,
}

fn default_validation() -> usize {
    VALIDATION_SIZE
}
fn default_synthetic_train() -> usize {
    2_000
}
fn default_synthetic_test() -> usize {
    512
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Cifar10,
            root: None,
            validation_size: VALIDATION_SIZE,
            train_subset: None,
            synthetic_train: default_synthetic_train(),
            synthetic_test: default_synthetic_test(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub gamma_list: Vec<f64>,
    /// Evaluate on a seeded subset of the test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gamma_list: vec![0.0, 2.0, 4.0, 6.0, 8.0],
            subset: None,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: ProtocolSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

/// Training, validation and test images of one run.
pub struct Splits {
    pub train: ImageSet,
    pub validation: ImageSet,
    pub test: ImageSet,
}

impl RunConfig {
    /// CIFAR-10 defaults for `protocol`.
    pub fn cifar10(protocol: ProtocolSpec) -> Self {
        Self {
            protocol,
            encoder: EncoderConfig::cifar10(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.to_string().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        if self.eval.gamma_list.iter().any(|g| !g.is_finite()) {
            return Err(Error::config("eval.gamma_list", "γ values must be finite"));
        }
        if self.dataset.source == DatasetSource::Cifar10 && self.encoder.image_dims != CIFAR10_DIMS {
            return Err(Error::config(
                "encoder.image_dims",
                format!("CIFAR-10 images are {CIFAR10_DIMS:?}"),
            ));
        }
        if self.dataset.source == DatasetSource::Synthetic
            && self.dataset.validation_size >= self.dataset.synthetic_train
        {
            return Err(Error::config(
                "dataset.validation_size",
                "must be smaller than dataset.synthetic_train",
            ));
        }
        Ok(())
    }

    /// Dataset root from the file or the environment.
    pub fn dataset_root(&self) -> Result<PathBuf> {
        data::resolve_root(self.dataset.root.as_deref(), DATA_ENV).ok_or_else(|| {
            Error::config(
                "dataset.root",
                format!("no dataset root given and ${DATA_ENV} is not set"),
            )
        })
    }

    /// Loads and splits the dataset; the validation carve-out and training
    /// subset are seeded by `train.seed`.
    pub fn load_splits(&self) -> Result<Splits> {
        let seed = self.train.seed;
        let (full_train, test) = match self.dataset.source {
            DatasetSource::Cifar10 => {
                let set = data::ingest_cifar10(&self.dataset_root()?)?;
                (set.train, set.test)
            }
            DatasetSource::Synthetic => {
                let dims = self.encoder.image_dims;
                (
                    data::synthetic(self.dataset.synthetic_train, dims, seed),
                    data::synthetic(self.dataset.synthetic_test, dims, seed.wrapping_add(1)),
                )
            }
        };
        let (train, validation) = full_train.split_validation(self.dataset.validation_size, seed)?;
        let train = match self.dataset.train_subset {
            Some(n) => train.subset(n, seed),
            None => train,
        };
        Ok(Splits { train, validation, test })
    }
}

//! The resolved run configuration: model keys plus run keys, one
//! key-value document.

use std::path::PathBuf;

use gracaps::kv::Document;
use gracaps::trainer::{AdamConfig, TrainConfig};
use gracaps::{Error, ModelConfig, Result};

pub const DATA_DIR_ENV: &str = "GRACAPS_DATA_DIR";
pub const OUT_DIR_ENV: &str = "GRACAPS_OUT_DIR";

/// Run keys accepted next to [`ModelConfig::KEYS`].
pub const RUN_KEYS: [&str; 15] = [
    "dataset",
    "data_dir",
    "out_dir",
    "train_limit",
    "test_limit",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "beta1",
    "beta2",
    "eps",
    "reconstruction_weight",
    "max_shift",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Leading examples used from each split; 0 means all.
    pub train_limit: usize,
    pub test_limit: usize,
}

fn bad(key: &str, value: &str, e: impl std::fmt::Display) -> Error {
    Error::Config {
        field: key.to_string(),
        reason: format!("`{value}`: {e}"),
    }
}

fn env_dir(var: &str, fallback: &str) -> PathBuf {
    std::env::var_os(var)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from(fallback), PathBuf::from)
}

impl RunConfig {
    /// Desk-scale defaults: the small network, 10k/2k examples, 5 epochs.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig {
                epochs: 5,
                batch_size: 32,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                max_shift: 2,
                seed: 0,
                ..TrainConfig::default()
            },
            dataset: "mnist".into(),
            data_dir: env_dir(DATA_DIR_ENV, "data"),
            out_dir: env_dir(OUT_DIR_ENV, "out"),
            train_limit: 10_000,
            test_limit: 2_000,
        }
    }

    /// The full-size network with its usual training schedule on all data.
    pub fn reference() -> Self {
        RunConfig {
            model: ModelConfig::mnist_reference(),
            train: TrainConfig::default(),
            train_limit: 0,
            test_limit: 0,
            ..Self::desk()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let v = value.trim();
        let uint = || v.parse::<usize>().map_err(|e| bad(key, value, e));
        let real = || v.parse::<f64>().map_err(|e| bad(key, value, e));
        let a = &mut self.train.adam;
        match key {
            "dataset" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(bad(key, value, "must be a plain directory name"));
                }
                self.dataset = v.to_string();
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_limit" => self.train_limit = uint()?,
            "test_limit" => self.test_limit = uint()?,
            "epochs" => self.train.epochs = uint()?,
            "batch_size" => self.train.batch_size = uint()?,
            "lr" => a.lr = real()?,
            "lr_decay" => a.decay = real()?,
            "beta1" => a.beta1 = real()?,
            "beta2" => a.beta2 = real()?,
            "eps" => a.eps = real()?,
            "reconstruction_weight" => self.train.reconstruction_weight = real()?,
            "max_shift" => self.train.max_shift = uint()?,
            "seed" => self.train.seed = v.parse().map_err(|e| bad(key, value, e))?,
            _ => {
                return Err(Error::Config {
                    field: key.to_string(),
                    reason: "is not a known key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.model.get(key) {
            return Some(v);
        }
        let a = &self.train.adam;
        Some(match key {
            "dataset" => self.dataset.clone(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "train_limit" => self.train_limit.to_string(),
            "test_limit" => self.test_limit.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "lr" => format!("{:?}", a.lr),
            "lr_decay" => format!("{:?}", a.decay),
            "beta1" => format!("{:?}", a.beta1),
            "beta2" => format!("{:?}", a.beta2),
            "eps" => format!("{:?}", a.eps),
            "reconstruction_weight" => format!("{:?}", self.train.reconstruction_weight),
            "max_shift" => self.train.max_shift.to_string(),
            "seed" => self.train.seed.to_string(),
            _ => return None,
        })
    }

    pub fn to_kv(&self) -> Document {
        let mut doc = self.model.to_kv();
        for key in RUN_KEYS {
            doc.set(key, self.get(key).expect("run keys render")).expect("single-line values");
        }
        doc
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.set("lr", "0.01").unwrap();
        cfg.set("heads", "4").unwrap();
        cfg.set("dataset", "fashion-mnist").unwrap();
        let mut back = RunConfig::reference();
        for (k, v) in cfg.to_kv().iter() {
            back.set(k, v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::desk();
        assert!(matches!(cfg.set("head", "4"), Err(Error::Config { field, .. }) if field == "head"));
        assert!(cfg.set("epochs", "five").is_err());
        assert!(cfg.set("dataset", "../x").is_err());
    }
}

//! Run configuration for `mtctl train`.
//!
//! ```toml
//! out_dir = "runs/desk"
//!
//! [data]
//! train_manifest = "data/train/manifest.toml"
//! val_manifest = "data/val/manifest.toml"
//! labeled_fraction = 0.25
//!
//! [net]
//! in_shape = [32, 32, 32]
//! base_channels = 4
//! depth = 2
//!
//! [train]
//! max_iters = 500
//! lr_main = 0.1
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use mtctl_core::network::NetConfig;
use mtctl_core::trainer::TrainConfig;
use mtctl_core::volumes::Manifest;
use mtctl_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    /// Labeled cases scored after training. Without it the labeled training
    /// cases are scored instead.
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    /// Share of the labeled training cases that keep their labels.
    #[serde(default = "DataConfig::all")]
    pub labeled_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

impl DataConfig {
    fn all() -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.out_dir = resolve(&cfg.out_dir);
        cfg.data.train_manifest = resolve(&cfg.data.train_manifest);
        cfg.data.val_manifest = cfg.data.val_manifest.as_deref().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        let f = self.data.labeled_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("labeled_fraction must be in (0, 1], got {f}")));
        }
        for m in [Some(&self.data.train_manifest), self.data.val_manifest.as_ref()].into_iter().flatten() {
            if !m.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", m.display())));
            }
            Manifest::read(m)?.check_paths()?;
        }
        Ok(())
    }
}

//! Run configuration: a TOML document with `[network]`, `[data]`,
//! `[train]` and `[output]` tables. Command-line flags override file
//! values; anything set in neither takes the built-in default.
//!
//! ```toml
//! [network]
//! preset = "mnist-2conv"
//!
//! [data]
//! kind = "mnist"
//! images = "data/mnist-10k/images-idx3-ubyte.gz"
//! labels = "data/mnist-10k/labels-idx1-ubyte.gz"
//! test_holdout = 2000
//!
//! [train]
//! epochs = 10
//! lambda = [0.0, 3e-5]
//!
//! [output]
//! dir = "runs/mnist"
//! ```
//!
//! Relative paths are resolved against the working directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shiftquant::data::{load_cifar10, load_mnist, synthetic, Dataset, Normalization, Split};
use shiftquant::nn::{preset, NetworkConfig};
use shiftquant::train::TrainConfig;
use shiftquant::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NetworkSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inline: Option<NetworkConfig>,
}

impl NetworkSource {
    pub fn resolve(&self) -> Result<NetworkConfig> {
        match (&self.preset, &self.inline) {
            (Some(name), None) => preset(name),
            (None, Some(cfg)) => Ok(cfg.clone()),
            _ => Err(Error::Config("[network] needs exactly one of `preset` or `inline`".into())),
        }
    }
}

fn default_holdout() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// IDX image and label files (optionally gzipped); the last
    /// `test_holdout` samples form the test split.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_holdout")]
        test_holdout: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalization: Option<Normalization>,
    },
    /// CIFAR-10 binary batches.
    Cifar10 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalization: Option<Normalization>,
    },
    /// Seeded prototype-plus-noise images shaped like the network input.
    Synthetic {
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default)]
        seed: u64,
        test_holdout: usize,
    },
}

fn default_noise() -> f32 {
    0.5
}

impl DataSource {
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            DataSource::Mnist { images, labels, .. } => vec![images, labels],
            DataSource::Cifar10 { train, test, .. } => train.iter().chain(test).map(|p| p.as_path()).collect(),
            DataSource::Synthetic { .. } => Vec::new(),
        }
    }

    pub fn load(&self, network: &NetworkConfig) -> Result<Split> {
        let split = match self {
            DataSource::Mnist { images, labels, test_holdout, normalization } => {
                let norm = normalization.clone().unwrap_or_else(Normalization::mnist);
                load_mnist(images, labels, &norm)?.split_holdout(*test_holdout)?
            }
            DataSource::Cifar10 { train, test, normalization } => {
                let norm = normalization.clone().unwrap_or_else(Normalization::cifar10);
                let refs = |v: &[PathBuf]| v.iter().map(|p| p.to_path_buf()).collect::<Vec<_>>();
                let (tr, te) = (refs(train), refs(test));
                let load = |v: &[PathBuf]| load_cifar10(&v.iter().map(|p| p.as_path()).collect::<Vec<_>>(), &norm);
                Split { train: load(&tr)?, test: load(&te)? }
            }
            DataSource::Synthetic { samples, noise, seed, test_holdout } => {
                synthetic(*seed, *samples, network.input, network.classes, *noise)?.split_holdout(*test_holdout)?
            }
        };
        check_fits(&split.train, network)?;
        check_fits(&split.test, network)?;
        Ok(split)
    }
}

fn check_fits(d: &Dataset, network: &NetworkConfig) -> Result<()> {
    if d.sample_shape() != network.input || d.classes > network.classes {
        return Err(Error::Config(format!(
            "dataset samples {:?} with {} classes do not fit network input {:?} with {} classes",
            d.sample_shape(),
            d.classes,
            network.input,
            network.classes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Adds a wall-clock column to the metrics log.
    pub timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default"), timing: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSource,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Checks everything that can be checked without running: network,
    /// hyperparameters, and that every data path exists.
    pub fn validate(&self) -> Result<NetworkConfig> {
        let net = self.network.resolve()?;
        self.train.validate()?;
        for p in self.data.paths() {
            if !p.is_file() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[network]
preset = "network-1"

[data]
kind = "synthetic"
samples = 64
test_holdout = 16

[train]
epochs = 1
lambda = [0.0, 1e-5]
threshold_init = -inf
"#;

    #[test]
    fn parse_and_roundtrip() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.train.threshold_init, f64::NEG_INFINITY);
        assert_eq!(cfg.train.batch_size, 128);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml(&SAMPLE.replace("epochs = 1", "epochz = 1")).is_err());
    }

    #[test]
    fn network_source_needs_exactly_one() {
        assert!(NetworkSource::default().resolve().is_err());
    }
}

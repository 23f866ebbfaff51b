//! Run configuration: one TOML file with a section per stage, its content
//! hash, and the reproducibility record every command writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::BootstrapConfig;
use crate::checkpoint::{self, FORMAT_VERSION};
use crate::classifier::{ClassifierTrainConfig, WeightMode};
use crate::detector::{DetectorTrainConfig, InferenceParams};
use crate::domaingan::GanTrainConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_RADIUS;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub split: Option<PathBuf>,
    /// Root for checkpoints; stages write into named subdirectories.
    pub checkpoints: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Trained generator directory used for domain augmentation.
    pub generators: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_per_scanner: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { val_per_scanner: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub weights: Option<Vec<f64>>,
    pub weight_mode: WeightMode,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { weights: Some(vec![0.5, 0.5]), weight_mode: WeightMode::Fixed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub tile: usize,
    pub overlap: usize,
    pub min_score: f64,
    pub dedup_radius: f64,
    pub accept_threshold: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let p = InferenceParams::default();
        Self { tile: p.tile, overlap: p.overlap, min_score: p.min_score, dedup_radius: p.dedup_radius, accept_threshold: None }
    }
}

impl InferenceConfig {
    pub fn params(&self) -> InferenceParams {
        InferenceParams { tile: self.tile, overlap: self.overlap, min_score: self.min_score, dedup_radius: self.dedup_radius }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub gan: GanTrainConfig,
    pub bootstrap: BootstrapConfig,
    pub detector: DetectorTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub ensemble: EnsembleConfig,
    pub cascade: InferenceConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            split: SplitConfig::default(),
            gan: GanTrainConfig::default(),
            bootstrap: BootstrapConfig::default(),
            detector: DetectorTrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            cascade: InferenceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; errors name the offending key path (e.g. `detector.lr0`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config { field: "<root>".into(), message: e.message().to_string() })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Config { field: if field == "." { "<root>".into() } else { field }, message: e.into_inner().message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { field: "<root>".into(), message: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        self.detector.validate()?;
        self.classifier.validate()?;
        if self.bootstrap.patch_size == 0 || !(0.0..=1.0).contains(&self.bootstrap.threshold) {
            return Err(Error::Config { field: "bootstrap.patch_size".into(), message: "need patch_size > 0 and threshold in [0, 1]".into() });
        }
        if self.split.val_per_scanner == 0 {
            return Err(Error::Config { field: "split.val_per_scanner".into(), message: "must be >= 1".into() });
        }
        if !(self.eval.radius > 0.0) {
            return Err(Error::Config { field: "eval.radius".into(), message: "must be > 0".into() });
        }
        if let Some(w) = &self.ensemble.weights {
            if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config { field: "ensemble.weights".into(), message: "must be non-negative with a positive sum".into() });
            }
        }
        let p = self.cascade.params();
        if p.tile == 0 || p.overlap >= p.tile {
            return Err(Error::Config { field: "cascade.overlap".into(), message: "need tile > overlap >= 0".into() });
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub package_version: String,
    pub workers: usize,
}

impl RunRecord {
    pub fn new(command: &str, args: Vec<String>, cfg: &RunConfig, workers: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            args,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            workers,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("run_{}.json", self.command));
        checkpoint::save_json(&path, self)?;
        Ok(path)
    }
}

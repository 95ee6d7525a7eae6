//! Experiment configuration files (TOML).
//!
//! Every section and key is optional except `dataset.path` and
//! `dataset.label_column`; unknown keys are rejected. The resolved config
//! (defaults filled in) is written back as TOML into the run manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelprop::LabelPropConfig;
use crate::trainer::{PredictorConfig, PretrainConfig};

/// Version of the config dialect, recorded in manifests.
pub const CONFIG_VERSION: u32 = 1;

pub const DEFAULT_SEEDS: [u64; 5] = [123, 127, 131, 137, 130];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Predictor on embedded raw features, labeled rows only.
    Supervised,
    /// Same network and data as `Supervised`.
    Mlp,
    /// Contrastive pretraining on labeled rows only, plain predictor.
    SelfSl,
    /// Pseudo-labeled pretraining, predictor without Mixup.
    SelfSlPl,
    /// Pseudo-labeled pretraining, predictor with Mixup and pseudo-labels.
    Full,
    /// Reconstruction-only pretraining, plain predictor.
    Ae,
    /// Single dense layer on embedded raw features.
    Logistic,
    /// `Full` with random instead of within-class mixing in pretraining.
    RandomMixAblation,
}

impl Arm {
    pub const ALL: [Arm; 8] = [
        Arm::Supervised,
        Arm::Mlp,
        Arm::SelfSl,
        Arm::SelfSlPl,
        Arm::Full,
        Arm::Ae,
        Arm::Logistic,
        Arm::RandomMixAblation,
    ];

    /// Arms compared by `ablate`.
    pub const LADDER: [Arm; 5] = [
        Arm::Supervised,
        Arm::SelfSl,
        Arm::SelfSlPl,
        Arm::Full,
        Arm::RandomMixAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Supervised => "supervised",
            Arm::Mlp => "mlp",
            Arm::SelfSl => "self_sl",
            Arm::SelfSlPl => "self_sl_pl",
            Arm::Full => "full",
            Arm::Ae => "ae",
            Arm::Logistic => "logistic",
            Arm::RandomMixAblation => "random_mix_ablation",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Arm::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("arm: unknown arm `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

/// Continuous column selection: an explicit list or every non-label,
/// non-categorical column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSelection {
    Keyword(String),
    List(Vec<String>),
}

impl Default for ColumnSelection {
    fn default() -> Self {
        ColumnSelection::Keyword("rest".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Separate evaluation file; when set, no test rows are split off `path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub label_column: String,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub continuous: ColumnSelection,
    #[serde(default = "default_labeled_fraction")]
    pub labeled_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_count: Option<usize>,
}

fn default_labeled_fraction() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder width; defaults to the embedded input width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,
    pub encoder_layers: usize,
    pub projector_layers: usize,
    /// Projector width; defaults to the embedded input width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projector_width: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_width: None,
            encoder_layers: 1,
            projector_layers: 1,
            projector_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveConfig {
    pub labeled_counts: Vec<usize>,
    pub arms: Vec<Arm>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            labeled_counts: vec![100, 1000],
            arms: vec![Arm::Supervised, Arm::Full],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write `pseudo_labels_<arm>_<seed>.csv` after pretraining.
    pub pseudo_labels: bool,
    /// Write encoder and predictor checkpoints at phase boundaries.
    pub checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_arm")]
    pub arm: Arm,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Recorded in the manifest; training itself is single-threaded.
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub labelprop: LabelPropConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub curve: CurveConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_arm() -> Arm {
    Arm::Full
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_threads() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative dataset and output paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset.path);
        if let Some(t) = cfg.dataset.test_path.as_mut() {
            resolve(t);
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if let ColumnSelection::Keyword(k) = &self.dataset.continuous {
            if k != "rest" {
                return Err(Error::Config(format!(
                    "dataset.continuous: expected a list of column names or \"rest\", got \"{k}\""
                )));
            }
        }
        let d = &self.dataset;
        if !(d.labeled_fraction > 0.0 && d.labeled_fraction <= 1.0) {
            return Err(Error::Config("dataset.labeled_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config("dataset.test_fraction must lie in [0, 1)".into()));
        }
        if self.model.encoder_layers == 0 {
            return Err(Error::Config("model.encoder_layers must be >= 1".into()));
        }
        if self.model.projector_layers == 0 {
            return Err(Error::Config("model.projector_layers must be >= 1".into()));
        }
        if self.labelprop.k == 0 {
            return Err(Error::Config("labelprop.k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.labelprop.alpha) {
            return Err(Error::Config("labelprop.alpha must lie in [0, 1)".into()));
        }
        self.pretrain.validate()?;
        self.predictor.validate()?;
        Ok(())
    }
}

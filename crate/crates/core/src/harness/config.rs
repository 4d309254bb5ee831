//! Experiment configuration: a sectioned TOML file in which unknown keys are
//! errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::cache::sha256_hex;
use crate::data::{build_protocol, ClassCatalog, ProtocolMode, SceneGenConfig, TaskProtocol};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::training::{MatchWeights, Objective, TrainHyper};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Coco,
}

/// COCO-panoptic annotation files with their image directories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoPaths {
    pub train_annotations: PathBuf,
    pub train_images: PathBuf,
    pub eval_annotations: PathBuf,
    pub eval_images: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Synthetic scenes; evaluation images follow the training indices.
    pub scene: SceneGenConfig,
    pub train_size: usize,
    pub eval_size: usize,
    pub coco: Option<CocoPaths>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::Synthetic,
            scene: SceneGenConfig::default(),
            train_size: 2000,
            eval_size: 400,
            coco: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub base: usize,
    pub increment: usize,
    pub mode: ProtocolMode,
    /// Seeded shuffle of the class order; absent keeps catalog order.
    pub ordering_seed: Option<u64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            base: 12,
            increment: 4,
            mode: ProtocolMode::Overlap,
            ordering_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Evaluate after every step with the heads existing at that step.
    pub every_step: bool,
    /// Also report mean IoU of the semantic maps.
    pub semantic: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            every_step: true,
            semantic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Objective,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainHyper,
    #[serde(default)]
    pub matching: MatchWeights,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.matching.validate()?;
        self.inference.validate()?;
        let d = &self.dataset;
        match d.source {
            DataSource::Synthetic => {
                d.scene.validate()?;
                if d.train_size == 0 || d.eval_size == 0 {
                    return Err(Error::Config("train_size and eval_size must be >= 1".into()));
                }
                if [d.scene.height, d.scene.width] != self.model.image_size {
                    return Err(Error::Config(format!(
                        "scene size {}x{} differs from model image_size {:?}",
                        d.scene.height, d.scene.width, self.model.image_size
                    )));
                }
                let protocol = self.protocol_for(&d.scene.catalog()).map_err(as_config)?;
                if !self.model.prompt_counts.is_empty()
                    && self.model.prompt_counts.len() != protocol.num_steps()
                {
                    return Err(Error::Config(format!(
                        "{} prompt counts for {} steps",
                        self.model.prompt_counts.len(),
                        protocol.num_steps()
                    )));
                }
            }
            DataSource::Coco => {
                if d.coco.is_none() {
                    return Err(Error::Config("dataset.source = \"coco\" needs a [dataset.coco] section".into()));
                }
            }
        }
        Ok(())
    }

    /// The task protocol over `catalog`.
    pub fn protocol_for(&self, catalog: &ClassCatalog) -> Result<TaskProtocol> {
        let p = &self.protocol;
        build_protocol(catalog, p.base, p.increment, p.mode, p.ordering_seed)
    }

    /// Hex sha256 of the canonical serialization, output directory excluded.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Protocol(m) => Error::Config(m),
        other => other,
    }
}

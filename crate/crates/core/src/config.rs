//! Run configuration: strict JSON, every pinned hyperparameter spelled out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ModalityShapes;
use crate::error::{Error, Result};
use crate::losses::{LossPlan, LossWeights};
use crate::model::{make_variant, ArchConfig, ModelConfig, Variant};
use crate::modality::Pair;
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Divide each contrastive sum of squares by the vector length.
    pub frcl_mean: bool,
}

impl LossConfig {
    pub fn new(weights: LossWeights, frcl_mean: bool) -> Self {
        let LossWeights { lambda1, lambda2, lambda3, lambda4 } = weights;
        Self { lambda1, lambda2, lambda3, lambda4, frcl_mean }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of the gradient.
    pub decoupled_wd: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("trainer.{field}: {why}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive and finite");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay", "must lie strictly between 0 and 1");
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return bad("plateau_patience/stop_patience", "must be positive");
        }
        Ok(())
    }
}

fn all_pairs() -> Vec<Pair> {
    Pair::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub trainer: TrainerConfig,
    pub dataset: PathBuf,
    pub seed: u64,
    pub variant: Variant,
    /// Encoders to build; a single pair gives a standalone two-modality model.
    #[serde(default = "all_pairs")]
    pub pairs: Vec<Pair>,
    pub dtype: DType,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Published model scale and training protocol.
    pub fn full_scale() -> Self {
        Self {
            model: ModelConfig {
                d_model: 256,
                heads: 8,
                layers: 6,
                d_ff: 1024,
                lmf_rank: 128,
                fusion_dim: 256,
                tabular_embed_dim: 256,
                lmf_bias_augment: false,
            },
            loss: LossConfig::new(LossWeights::DEFAULT, false),
            trainer: TrainerConfig {
                learning_rate: 1e-3,
                weight_decay: 5e-4,
                decoupled_wd: false,
                batch_size: 16,
                max_epochs: 100,
                lr_decay: 0.8,
                plateau_patience: 2,
                stop_patience: 6,
            },
            dataset: PathBuf::from("data.tmds"),
            seed: 0,
            variant: Variant::Full,
            pairs: all_pairs(),
            dtype: DType::F32,
            output_dir: PathBuf::from("runs/full_scale"),
        }
    }

    /// Small model used by the experiment suites. The contrastive terms are
    /// length-normalised and training is capped at 40 epochs.
    pub fn desk() -> Self {
        let full_scale = Self::full_scale();
        Self {
            model: ModelConfig {
                d_model: 32,
                heads: 4,
                layers: 2,
                d_ff: 64,
                lmf_rank: 8,
                fusion_dim: 32,
                tabular_embed_dim: 16,
                lmf_bias_augment: false,
            },
            loss: LossConfig::new(LossWeights::DEFAULT, true),
            trainer: TrainerConfig {
                max_epochs: 40,
                ..full_scale.trainer.clone()
            },
            output_dir: PathBuf::from("runs/desk"),
            ..full_scale
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights().validate()?;
        self.trainer.validate()?;
        if self.pairs.is_empty() {
            return Err(Error::Config("pairs: at least one pair is required".into()));
        }
        Ok(())
    }

    /// Architecture and objective for data with the given shapes.
    pub fn build(&self, inputs: ModalityShapes, label_count: usize) -> Result<(ArchConfig, LossPlan)> {
        self.validate()?;
        let base = ArchConfig {
            pairs: self.pairs.clone(),
            ..ArchConfig::new(self.model.clone(), inputs, label_count)
        };
        let (arch, plan) = make_variant(&base, &self.loss.weights(), self.loss.frcl_mean, self.variant);
        arch.validate()?;
        Ok((arch, plan))
    }
}

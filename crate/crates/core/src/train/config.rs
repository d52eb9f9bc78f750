use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::dws::WeightingConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

/// Where training and held-out samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Generated on the fly; test samples continue the training stream.
    Synthetic {
        train: usize,
        test: usize,
        spec: SyntheticSpec,
    },
    /// Directories written by `gen-data`.
    Persisted {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

/// Which per-task losses feed the weighting history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSource {
    Train,
    Test,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    15
}
fn default_source() -> LossSource {
    LossSource::Train
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Random flips and rotations of training images.
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_source")]
    pub weighting_losses: LossSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub weighting: WeightingConfig,
    pub data: DataSource,
}

impl TrainConfig {
    pub fn load(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.weighting.validate()?;
        match &self.data {
            DataSource::Synthetic { train, spec, test } => {
                if *train == 0 {
                    return Err(Error::Config("need at least one training sample".into()));
                }
                if *test == 0 && self.weighting_losses == LossSource::Test {
                    return Err(Error::Config("test-loss weighting needs a test split".into()));
                }
                spec.validate()?;
                if spec.image_shape() != self.model.input {
                    return Err(Error::Config(format!(
                        "synthetic images are {:?} but the model expects {:?}",
                        spec.image_shape(),
                        self.model.input
                    )));
                }
            }
            DataSource::Persisted { test, .. } => {
                if test.is_none() && self.weighting_losses == LossSource::Test {
                    return Err(Error::Config("test-loss weighting needs a test split".into()));
                }
            }
        }
        Ok(())
    }

    /// Settings of the reference desk run: 8 attributes in 2 groups,
    /// 2,000 / 500 samples, 15 epochs.
    pub fn desk_default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 15,
            seed: 0,
            augment: false,
            weighting_losses: LossSource::Train,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            weighting: WeightingConfig::default(),
            data: DataSource::Synthetic {
                train: 2000,
                test: 500,
                spec: SyntheticSpec::desk_default(),
            },
        }
    }

    /// Input 3×16×16, C = 32, 3 groups of 2 attributes.
    pub fn tiny() -> Self {
        let grouping = crate::grouping::AttributeGrouping::from_groups(
            None,
            vec![
                ("A".into(), vec!["a0".into(), "a1".into()]),
                ("B".into(), vec!["b0".into(), "b1".into()]),
                ("C".into(), vec!["c0".into(), "c1".into()]),
            ],
        )
        .expect("static grouping");
        let mut spec = SyntheticSpec::new(grouping);
        spec.height = 16;
        spec.width = 16;
        Self {
            batch_size: 2,
            epochs: 1,
            model: ModelConfig::tiny(),
            data: DataSource::Synthetic {
                train: 2,
                test: 0,
                spec,
            },
            ..Self::desk_default()
        }
    }
}

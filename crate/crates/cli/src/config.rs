//! The TOML run configuration.

use std::path::Path;

use anyhow::{bail, Context};
use dbvae::data::{DatasetSpec, GroupCounts};
use dbvae::train::TrainConfig;
use dbvae::RngStream;
use serde::{Deserialize, Serialize};

const STREAM_TRAIN_DATA: u64 = 101;
const STREAM_TEST_DATA: u64 = 102;
const STREAM_TRAINING: u64 = 103;

/// Counts and channels of one generated split. Its seed is derived from the
/// run seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub faces: GroupCounts,
    pub nonfaces: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of all randomness: dataset generation and training seeds are
    /// derived from it.
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub train_data: SplitConfig,
    pub test_data: SplitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            checkpoint_every: 0,
            train_data: SplitConfig {
                faces: GroupCounts {
                    light_a: 180,
                    light_b: 180,
                    dark_a: 20,
                    dark_b: 20,
                },
                nonfaces: 200,
                channels: 1,
            },
            test_data: SplitConfig {
                faces: GroupCounts::uniform(50),
                nonfaces: 200,
                channels: 1,
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        RunConfig::default().train_data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let table: toml::Table = text.parse()?;
        if table
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"))
        {
            bail!("`train.seed` is derived; set the top-level `seed` instead");
        }
        Ok(table.try_into()?)
    }

    pub fn to_toml(&self) -> String {
        let mut copy = self.clone();
        copy.train.seed = 0;
        let mut table = toml::Table::try_from(&copy).expect("config serializes");
        if let Some(train) = table.get_mut("train").and_then(|t| t.as_table_mut()) {
            train.remove("seed");
        }
        toml::to_string(&table).expect("config serializes")
    }

    pub fn split(&self, split: Split) -> DatasetSpec {
        let (s, stream) = match split {
            Split::Train => (self.train_data, STREAM_TRAIN_DATA),
            Split::Test => (self.test_data, STREAM_TEST_DATA),
        };
        DatasetSpec {
            faces: s.faces,
            nonfaces: s.nonfaces,
            channels: s.channels,
            seed: RngStream::new(self.seed).derive(stream).seed(),
        }
    }

    /// The training configuration with its derived seed filled in.
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            seed: RngStream::new(self.seed).derive(STREAM_TRAINING).seed(),
            ..self.train
        }
    }

    /// First line of every artifact.
    pub fn header(&self, extra: &str) -> String {
        if extra.is_empty() {
            format!("seed={}", self.seed)
        } else {
            format!("seed={} {extra}", self.seed)
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.split(Split::Train).validate().context("train_data")?;
        self.split(Split::Test).validate().context("test_data")?;
        self.training().validate().context("train")?;
        let t = self.eval.threshold;
        if !(t > 0.0 && t < 1.0) {
            bail!("eval.threshold must be in (0, 1), got {t}");
        }
        Ok(())
    }
}

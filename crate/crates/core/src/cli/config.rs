use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalbench::Workload;
use crate::redundancy::DropMode;
use crate::retrieval::{SyntheticTask, TrainConfig};
use crate::slimming::SlimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Profile,
    Drop,
    Slim,
    Train,
    Eval,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Profile, Stage::Drop, Stage::Slim, Stage::Train, Stage::Eval, Stage::Bench];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Profile => "profile",
            Stage::Drop => "drop",
            Stage::Slim => "slim",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Bench => "bench",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub calibration_samples: usize,
    pub calibration_len: usize,
    /// Use uniform random tokens instead of corpus-like sequences.
    pub random_tokens: bool,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            calibration_samples: crate::redundancy::DEFAULT_CALIBRATION_SAMPLES,
            calibration_len: crate::redundancy::DEFAULT_CALIBRATION_LEN,
            random_tokens: false,
        }
    }
}

/// Retained-layer counts; `None` keeps every present sublayer of that group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropConfig {
    pub mode: DropMode,
    pub k_attn: Option<usize>,
    pub k_mlp: Option<usize>,
}

impl Default for DropConfig {
    fn default() -> Self {
        Self { mode: DropMode::MlpOnly, k_attn: None, k_mlp: Some(6) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

/// Everything a pipeline run needs. Parsed from TOML; command-line flags are
/// applied on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub task: SyntheticTask,
    pub model: EncoderConfig,
    pub base_train: TrainConfig,
    pub profile: ProfileConfig,
    pub drop: DropConfig,
    pub slim: SlimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: Workload,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stages: Stage::ALL.to_vec(),
            task: SyntheticTask::default(),
            model: EncoderConfig::default(),
            base_train: TrainConfig::desk_base(),
            profile: ProfileConfig::default(),
            drop: DropConfig::default(),
            slim: SlimConfig::default(),
            train: TrainConfig::desk_retrain(),
            eval: EvalConfig::default(),
            bench: Workload::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stages must be a subsequence of profile → drop → slim → train → eval → bench, got {:?}",
                self.stages.iter().map(|s| s.name()).collect::<Vec<_>>()
            )));
        }
        if self.stages.contains(&Stage::Drop) && !self.stages.contains(&Stage::Profile) {
            return Err(Error::Config("the drop stage needs a profile stage before it".into()));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.task.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocab {} differs from model vocab {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.doc_len.max(self.task.query_len) > self.model.max_seq_len {
            return Err(Error::Config("task sequences exceed the model's max_seq_len".into()));
        }
        self.base_train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.slim.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Seed for one stage, derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        split_seed(self.seed, stage)
    }
}

pub fn split_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

//! Resolved run configuration and the manifest written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(bits: u8) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub finetune_epochs: usize,
    /// Must start at 0 and ascend.
    pub fractions: Vec<f64>,
    pub batch_size: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            finetune_epochs: 50,
            fractions: (0..=10).map(|i| i as f64 / 10.0).collect(),
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: u32,
    pub sessions: u32,
    pub n_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub snr: f64,
    pub sample_rate: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 2,
            sessions: 5,
            n_per_class: 50,
            channels: 32,
            samples: 1000,
            snr: 1.0,
            sample_rate: 250.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub trials: usize,
    pub warmup: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            warmup: 50,
        }
    }
}

/// Everything a command needs. The top-level seed is copied into the
/// training and split seeds and also initializes the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub montage: Option<PathBuf>,
    pub subject: Option<u32>,
    pub session: Option<u32>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub interpret: InterpretConfig,
    pub synth: SynthConfig,
    pub latency: LatencyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            precision: Precision::F32,
            data: None,
            out: PathBuf::from("mftnet-out"),
            checkpoint: None,
            montage: None,
            subject: None,
            session: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            interpret: InterpretConfig::default(),
            synth: SynthConfig::default(),
            latency: LatencyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the seed into the nested configs and validates them.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.split.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        if self.interpret.batch_size == 0 {
            return Err(Error::Config(
                "interpret.batch_size must be positive".into(),
            ));
        }
        if self.latency.trials == 0 {
            return Err(Error::Config("latency.trials must be positive".into()));
        }
        Ok(self)
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --data <dir>".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputChecksum {
    pub path: String,
    pub bytes: u64,
    pub crc32: String,
}

impl InputChecksum {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            crc32: format!("{:08x}", crc32fast::hash(&bytes)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
    pub inputs: Vec<InputChecksum>,
    pub outputs: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"precision\":32"));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "precision": 64, "train": {"epochs": 3}}"#)
                .unwrap();
        let c = c.finish().unwrap();
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!((c.train.seed, c.split.seed), (7, 7));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_precision() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"precision": 16}"#).is_err());
    }
}

//! Electrode names for CSV exports.
//!
//! A montage file is JSON in one of three shapes: a list of names in storage
//! order, `{"channels": [...]}`, or an object mapping index strings to names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Montage {
    names: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MontageFile {
    List(Vec<String>),
    Wrapped { channels: Vec<String> },
    Indexed(BTreeMap<String, String>),
}

impl Montage {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("montage lists no electrodes".into()));
        }
        Ok(Self { names })
    }

    /// `ch0`, `ch1`, … for when no montage is supplied.
    pub fn numbered(channels: usize) -> Self {
        Self {
            names: (0..channels).map(|i| format!("ch{i}")).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: MontageFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("unreadable montage: {e}")))?;
        let names = match parsed {
            MontageFile::List(v) | MontageFile::Wrapped { channels: v } => v,
            MontageFile::Indexed(map) => {
                let mut pairs = map
                    .into_iter()
                    .map(|(k, v)| {
                        k.parse::<usize>().map(|i| (i, v)).map_err(|_| {
                            Error::Config(format!("montage key {k:?} is not an index"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                pairs.sort_by_key(|(i, _)| *i);
                if pairs.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
                    return Err(Error::Config(
                        "montage indices must be 0..C without gaps".into(),
                    ));
                }
                pairs.into_iter().map(|(_, v)| v).collect()
            }
        };
        Self::new(names)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if self.names.len() != channels {
            return Err(Error::Config(format!(
                "montage names {} electrodes, data has {channels}",
                self.names.len()
            )));
        }
        Ok(())
    }
}

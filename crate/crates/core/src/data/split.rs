use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrialSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_session: u32,
    pub test_sessions: Vec<u32>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_session: 1,
            test_sessions: vec![2, 3, 4, 5],
            val_fraction: 0.2,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.test_sessions.contains(&self.train_session) {
            return Err(Error::Config(format!(
                "train session {} also listed as a test session",
                self.train_session
            )));
        }
        Ok(())
    }
}

/// Stratified, seeded partition of trial indices into (train, validation).
///
/// Classes are processed in ascending label order from one generator; each
/// class contributes `round(fraction * count)` validation trials, clamped so
/// both sides keep at least one. Both index lists are returned sorted.
pub fn split_indices(
    labels: &[u8],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut present = 0;
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] as usize == c)
            .collect();
        if idx.is_empty() {
            continue;
        }
        present += 1;
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class {c} has {} trial(s); need at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((val_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    if present < 2 {
        return Err(Error::Data("splitting needs at least two classes".into()));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split_train_val(set: &TrialSet, spec: &SplitSpec) -> Result<(TrialSet, TrialSet)> {
    spec.validate()?;
    if set.session() != spec.train_session {
        return Err(Error::Data(format!(
            "split expects session {} trials, got session {}",
            spec.train_session,
            set.session()
        )));
    }
    let (train, val) = split_indices(set.labels(), spec.val_fraction, spec.seed)?;
    Ok((set.subset(&train), set.subset(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % 2) as u8).collect()
    }

    #[test]
    fn eighty_twenty() {
        let (tr, va) = split_indices(&balanced(100), 0.2, 42).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let ones = va.iter().filter(|&&i| i % 2 == 1).count();
        assert_eq!(ones, 10);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = split_indices(&balanced(100), 0.2, 42).unwrap();
        assert_eq!(a, split_indices(&balanced(100), 0.2, 42).unwrap());
        assert_ne!(a, split_indices(&balanced(100), 0.2, 43).unwrap());
    }

    #[test]
    fn too_few_per_class() {
        assert!(split_indices(&[0, 1, 1, 1], 0.2, 1).is_err());
        assert!(split_indices(&[0, 0, 0], 0.2, 1).is_err());
        assert!(split_indices(&[0, 0, 1, 1], 1.0, 1).is_err());
    }

    #[test]
    fn session_must_match() {
        let s = TrialSet::new(vec![0.0; 4], vec![0, 0, 1, 1], 1, 1, 250.0, 1, 2).unwrap();
        assert!(split_train_val(&s, &SplitSpec::default()).is_err());
    }
}

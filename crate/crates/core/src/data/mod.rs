//! Trial storage and the canonical ETF trial file.
//!
//! ETF layout (little-endian): magic `EEGT`, u32 version = 1, u32 n, u32 C,
//! u32 T, f32 sample rate, u32 subject, u32 session, n label bytes, n·C·T f32
//! samples (trial-major, then electrode, then time), CRC32 of everything
//! before it.

pub mod montage;
pub mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binary::{append_crc, check_magic, verify_crc, Reader};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use montage::Montage;
pub use split::{split_indices, split_train_val, SplitSpec};
pub use synth::{bandpower, synth_generate, PlantChannels, SynthSpec};

pub const ETF_MAGIC: [u8; 4] = *b"EEGT";
pub const ETF_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
/// Motor-imagery classes: 0 = left hand, 1 = right hand.
pub const CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    data: Vec<f32>,
    labels: Vec<u8>,
    channels: usize,
    samples: usize,
    sample_rate: f32,
    subject: u32,
    session: u32,
}

impl TrialSet {
    /// Validates every invariant: sizes agree, labels below [`CLASSES`],
    /// values finite, subject ≥ 1, session in 1..=5, positive sample rate.
    pub fn new(
        data: Vec<f32>,
        labels: Vec<u8>,
        channels: usize,
        samples: usize,
        sample_rate: f32,
        subject: u32,
        session: u32,
    ) -> Result<Self> {
        if channels == 0 || samples == 0 {
            return Err(Error::Data(format!(
                "extents must be positive, got C={channels}, T={samples}"
            )));
        }
        let expected = labels
            .len()
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(samples))
            .ok_or_else(|| Error::Data("trial extents overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Data(format!(
                "{} samples for {} trials of {channels}x{samples}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= CLASSES) {
            return Err(Error::Data(format!(
                "label {} of trial {i} outside 0..{CLASSES}",
                labels[i]
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite sample in trial {}",
                i / (channels * samples)
            )));
        }
        if subject == 0 {
            return Err(Error::Data("subject id must be positive".into()));
        }
        if !(1..=5).contains(&session) {
            return Err(Error::Data(format!("session {session} outside 1..=5")));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::Data(format!(
                "sample rate {sample_rate} must be positive"
            )));
        }
        Ok(Self {
            data,
            labels,
            channels,
            samples,
            sample_rate,
            subject,
            session,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn sample_rate(&self) -> f32 {
        self.sample_rate
    }

    pub fn subject(&self) -> u32 {
        self.subject
    }

    pub fn session(&self) -> u32 {
        self.session
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One trial, `C·T` values, electrode-major.
    pub fn trial(&self, i: usize) -> &[f32] {
        let n = self.channels * self.samples;
        &self.data[i * n..(i + 1) * n]
    }

    /// Number of trials per label value `0..=max`.
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self
            .labels
            .iter()
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0);
        let mut counts = vec![0; k];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> TrialSet {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.samples);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.trial(i));
            labels.push(self.labels[i]);
        }
        TrialSet {
            data,
            labels,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> TrialSet {
        TrialSet {
            data: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            samples: self.samples,
            sample_rate: self.sample_rate,
            subject: self.subject,
            session: self.session,
        }
    }

    /// Same trials relabelled with another subject/session.
    pub fn with_ids(mut self, subject: u32, session: u32) -> Result<Self> {
        if subject == 0 || !(1..=5).contains(&session) {
            return Err(Error::Data(format!(
                "invalid ids subject={subject} session={session}"
            )));
        }
        self.subject = subject;
        self.session = session;
        Ok(self)
    }

    /// Model input `[B, C, T, 1]` for the given trials.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Tensor<F> {
        let per = self.channels * self.samples;
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend(self.trial(i).iter().map(|&v| F::lit(v as f64)));
        }
        Tensor::new(vec![indices.len(), self.channels, self.samples, 1], out)
            .expect("sized from extents")
    }

    pub fn to_etf(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.labels.len() + 4 * self.data.len() + 4);
        buf.extend_from_slice(&ETF_MAGIC);
        for v in [
            ETF_VERSION,
            self.len() as u32,
            self.channels as u32,
            self.samples as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.sample_rate.to_le_bytes());
        buf.extend_from_slice(&self.subject.to_le_bytes());
        buf.extend_from_slice(&self.session.to_le_bytes());
        buf.extend_from_slice(&self.labels);
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        append_crc(&mut buf);
        buf
    }

    /// Parses a complete ETF image. Header arithmetic is checked before the
    /// checksum so that truncation is reported as such.
    pub fn from_etf(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, &ETF_MAGIC)?;
        let mut r = Reader::new(&bytes[4..]);
        let version = r.u32()?;
        if version != ETF_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let t = r.u32()? as usize;
        let rate = r.f32()?;
        let subject = r.u32()?;
        let session = r.u32()?;
        let total = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(t))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_LEN + n + 4))
            .ok_or_else(|| Error::Inconsistent(format!("header n={n} C={c} T={t} overflows")))?;
        if bytes.len() < total {
            return Err(Error::Truncated {
                needed: total,
                found: bytes.len(),
            });
        }
        if bytes.len() > total {
            return Err(Error::Inconsistent(format!(
                "{} bytes after the declared payload",
                bytes.len() - total
            )));
        }
        let payload = verify_crc(bytes)?;
        let mut r = Reader::new(&payload[HEADER_LEN..]);
        let labels = r.take(n)?.to_vec();
        let raw = r.take(n * c * t * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        TrialSet::new(data, labels, c, t, rate, subject, session).map_err(|e| match e {
            Error::Data(m) => Error::Inconsistent(m),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_etf())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_etf(&fs::read(path)?)
    }
}

/// Trial sets keyed by subject, then session.
pub type Corpus = BTreeMap<u32, BTreeMap<u32, TrialSet>>;

/// Loads every `*.etf` file in `dir` (not recursive), grouping by the subject
/// and session recorded in each header. Duplicate pairs are an error.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "etf"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .etf files in {}",
            dir.as_ref().display()
        )));
    }
    let mut corpus = Corpus::new();
    for p in paths {
        let set = TrialSet::load(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        let (subject, session) = (set.subject(), set.session());
        if corpus
            .entry(subject)
            .or_default()
            .insert(session, set)
            .is_some()
        {
            return Err(Error::Data(format!(
                "subject {subject} session {session} appears twice (second copy in {})",
                p.display()
            )));
        }
    }
    Ok(corpus)
}

/// Optional provenance written next to an ETF file (same basename, `.json`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant_channels: Option<PlantChannels>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(etf: impl AsRef<Path>) -> PathBuf {
    etf.as_ref().with_extension("json")
}

impl Sidecar {
    pub fn save_for(&self, etf: impl AsRef<Path>) -> Result<()> {
        fs::write(sidecar_path(etf), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// `Ok(None)` when no sidecar exists.
    pub fn load_for(etf: impl AsRef<Path>) -> Result<Option<Self>> {
        let path = sidecar_path(etf);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrialSet {
        let data = (0..3 * 2 * 4).map(|i| i as f32 * 0.5 - 3.0).collect();
        TrialSet::new(data, vec![0, 1, 0], 2, 4, 250.0, 7, 2).unwrap()
    }

    #[test]
    fn etf_round_trip() {
        let s = sample();
        let bytes = s.to_etf();
        assert_eq!(bytes.len(), 32 + 3 + 4 * 24 + 4);
        assert_eq!(TrialSet::from_etf(&bytes).unwrap(), s);
    }

    #[test]
    fn header_arithmetic_governs_length() {
        let bytes = sample().to_etf();
        assert!(matches!(
            TrialSet::from_etf(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { needed, .. }) if needed == bytes.len()
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            TrialSet::from_etf(&long),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_etf();
        let mut m = bytes.clone();
        m[1] = b'X';
        assert!(matches!(
            TrialSet::from_etf(&m),
            Err(Error::BadMagic { .. })
        ));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(
            TrialSet::from_etf(&v),
            Err(Error::UnsupportedVersion(2))
        ));
        let mut c = bytes.clone();
        c[40] ^= 0x10;
        assert!(matches!(
            TrialSet::from_etf(&c),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn invariant_violations_rejected() {
        assert!(TrialSet::new(vec![f32::NAN; 4], vec![0], 2, 2, 250.0, 1, 1).is_err());
        assert!(TrialSet::new(vec![0.0; 3], vec![0], 2, 2, 250.0, 1, 1).is_err());
        assert!(TrialSet::new(vec![0.0; 4], vec![0], 2, 2, 250.0, 0, 1).is_err());
        assert!(TrialSet::new(vec![0.0; 4], vec![0], 2, 2, 250.0, 1, 6).is_err());
    }

    #[test]
    fn batch_layout() {
        let s = sample();
        let b: Tensor<f64> = s.batch(&[2, 0]);
        assert_eq!(b.shape(), &[2, 2, 4, 1]);
        assert_eq!(b.data()[0], s.trial(2)[0] as f64);
        assert_eq!(b.data()[8], s.trial(0)[0] as f64);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let etf = dir.path().join("s01.etf");
        assert!(Sidecar::load_for(&etf).unwrap().is_none());
        let mut sc = Sidecar {
            source: Some("sub-001_ses-01_task_motorimagery_eeg.mat".into()),
            ..Sidecar::default()
        };
        sc.extra.insert("note".into(), serde_json::json!("x"));
        sc.save_for(&etf).unwrap();
        assert_eq!(Sidecar::load_for(&etf).unwrap(), Some(sc));
    }
}

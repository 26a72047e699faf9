//! Synthetic two-class trials with a known spatial signature.
//!
//! Each trial is unit-variance Gaussian noise; class 0 adds an 11 Hz sinusoid
//! of amplitude `sqrt(2 * snr)` (power `snr`) with a random phase to the
//! left-plant electrodes, class 1 to the disjoint right-plant electrodes.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TrialSet;
use crate::error::{Error, Result};

pub const PLANT_FREQUENCY_HZ: f64 = 11.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantChannels {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

impl PlantChannels {
    /// `max(1, C/16)` electrodes starting at `C/4` (left) and `3C/4` (right).
    pub fn for_channels(c: usize) -> Result<Self> {
        let m = (c / 16).max(1);
        let left: Vec<usize> = (c / 4..c / 4 + m).collect();
        let right: Vec<usize> = (3 * c / 4..3 * c / 4 + m).collect();
        let fits =
            right.last().is_some_and(|&r| r < c) && left.last().is_some_and(|&l| l < right[0]);
        if !fits {
            return Err(Error::Data(format!(
                "{c} electrodes cannot hold two disjoint plant subsets"
            )));
        }
        Ok(Self { left, right })
    }

    /// Electrodes carrying the signal for `class`.
    pub fn for_class(&self, class: u8) -> &[usize] {
        if class == 0 {
            &self.left
        } else {
            &self.right
        }
    }

    pub fn all(&self) -> Vec<usize> {
        self.left.iter().chain(&self.right).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub seed: u64,
    pub snr: f64,
    pub sample_rate: f32,
    pub subject: u32,
    pub session: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            channels: 32,
            samples: 1000,
            seed: 42,
            snr: 1.0,
            sample_rate: 250.0,
            subject: 1,
            session: 1,
        }
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(TrialSet, PlantChannels)> {
    if spec.n_per_class == 0 {
        return Err(Error::Data("n_per_class must be at least 1".into()));
    }
    if !(spec.snr > 0.0) {
        return Err(Error::Data(format!("snr {} must be positive", spec.snr)));
    }
    if spec.samples == 0 {
        return Err(Error::Data("samples must be positive".into()));
    }
    let plants = PlantChannels::for_channels(spec.channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<u8> = (0..2 * spec.n_per_class).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let amp = (2.0 * spec.snr).sqrt();
    let w = 2.0 * PI * PLANT_FREQUENCY_HZ / spec.sample_rate as f64;
    let (c, t) = (spec.channels, spec.samples);
    let mut data = Vec::with_capacity(labels.len() * c * t);
    for &label in &labels {
        let phase = rng.random::<f64>() * 2.0 * PI;
        let plant = plants.for_class(label);
        for ch in 0..c {
            let active = plant.contains(&ch);
            for s in 0..t {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let signal = if active {
                    amp * (w * s as f64 + phase).sin()
                } else {
                    0.0
                };
                data.push((noise + signal) as f32);
            }
        }
    }
    let set = TrialSet::new(
        data,
        labels,
        c,
        t,
        spec.sample_rate,
        spec.subject,
        spec.session,
    )?;
    Ok((set, plants))
}

/// Periodogram power at `freq`: `2 |Σ x_t e^{-iωt}|² / T²`, which equals
/// `A²/2` for an on-bin sinusoid of amplitude `A`.
pub fn bandpower(signal: &[f32], freq: f64, sample_rate: f64) -> f64 {
    let w = 2.0 * PI * freq / sample_rate;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, &x) in signal.iter().enumerate() {
        let a = w * t as f64;
        re += x as f64 * a.cos();
        im -= x as f64 * a.sin();
    }
    let n = signal.len() as f64;
    2.0 * (re * re + im * im) / (n * n)
}

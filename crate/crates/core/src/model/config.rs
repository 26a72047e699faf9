use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::GeluKind;

/// Which streams feed the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoTransformer,
    NoMultiscale,
    EegnetBaseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::EegnetBaseline,
        Variant::NoTransformer,
        Variant::NoMultiscale,
        Variant::Full,
    ];

    pub fn has_transformer(self) -> bool {
        matches!(self, Variant::Full | Variant::NoMultiscale)
    }

    pub fn has_multiscale(self) -> bool {
        matches!(self, Variant::Full | Variant::NoTransformer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTransformer => "no-transformer",
            Variant::NoMultiscale => "no-multiscale",
            Variant::EegnetBaseline => "eegnet-baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-transformer" => Ok(Variant::NoTransformer),
            "no-multiscale" => Ok(Variant::NoMultiscale),
            "eegnet-baseline" | "eegnet" => Ok(Variant::EegnetBaseline),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, no-transformer, no-multiscale, eegnet-baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Electrodes.
    pub channels: usize,
    /// Time samples per trial.
    pub samples: usize,
    pub classes: usize,
    pub branch_kernels: Vec<usize>,
    pub branch_filters: usize,
    pub branch_dropout: f64,
    pub attention_heads: usize,
    pub transformer_ff_dim: usize,
    pub transformer_dropout: f64,
    pub depth_multiplier: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub separable_kernel: usize,
    pub separable_filters: usize,
    pub spatial_dropout: f64,
    pub dense_max_norm: f64,
    /// Temporal kernel of the single branch in the no-multiscale ablation.
    pub single_scale_kernel: usize,
    /// Temporal kernel of the EEGNet baseline.
    pub eegnet_kernel: usize,
    pub gelu: GeluKind,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            samples: 1000,
            classes: 2,
            branch_kernels: vec![5, 9, 13, 29, 61, 125],
            branch_filters: 8,
            branch_dropout: 0.5,
            attention_heads: 2,
            transformer_ff_dim: 32,
            transformer_dropout: 0.2,
            depth_multiplier: 2,
            pool1: 4,
            pool2: 8,
            separable_kernel: 16,
            separable_filters: 16,
            spatial_dropout: 0.3,
            dense_max_norm: 0.25,
            single_scale_kernel: 125,
            eegnet_kernel: 147,
            gelu: GeluKind::Erf,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Temporal kernels actually instantiated for the configured variant.
    pub fn active_kernels(&self) -> Vec<usize> {
        match self.variant {
            Variant::Full | Variant::NoTransformer => self.branch_kernels.clone(),
            Variant::NoMultiscale => vec![self.single_scale_kernel],
            Variant::EegnetBaseline => vec![self.eegnet_kernel],
        }
    }

    /// Width of the fused tensor entering the spatial stage.
    pub fn fused_maps(&self) -> usize {
        match self.variant {
            Variant::EegnetBaseline => self.branch_filters,
            v => {
                self.active_kernels().len() * self.branch_filters + usize::from(v.has_transformer())
            }
        }
    }

    pub fn pooled_samples(&self) -> usize {
        self.samples / self.pool1 / self.pool2
    }

    /// Length of the flattened feature vector fed to the classifier.
    pub fn flat_features(&self) -> usize {
        self.separable_filters * self.pooled_samples()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("samples", self.samples),
            ("branch_filters", self.branch_filters),
            ("attention_heads", self.attention_heads),
            ("transformer_ff_dim", self.transformer_ff_dim),
            ("depth_multiplier", self.depth_multiplier),
            ("pool1", self.pool1),
            ("pool2", self.pool2),
            ("separable_kernel", self.separable_kernel),
            ("separable_filters", self.separable_filters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.branch_kernels.is_empty() {
            return Err(Error::Config("branch_kernels must not be empty".into()));
        }
        for k in self.active_kernels() {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("temporal kernel {k} must be odd")));
            }
            if k > self.samples {
                return Err(Error::Config(format!(
                    "temporal kernel {k} exceeds {} samples",
                    self.samples
                )));
            }
        }
        for (name, r) in [
            ("branch_dropout", self.branch_dropout),
            ("transformer_dropout", self.transformer_dropout),
            ("spatial_dropout", self.spatial_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1)")));
            }
        }
        if !(self.dense_max_norm > 0.0) {
            return Err(Error::Config("dense_max_norm must be positive".into()));
        }
        if self.variant.has_transformer() && !self.channels.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!(
                "{} electrodes not divisible by {} attention heads",
                self.channels, self.attention_heads
            )));
        }
        let after_pool1 = self.samples / self.pool1;
        if after_pool1 == 0 || after_pool1 / self.pool2 == 0 {
            return Err(Error::Config(format!(
                "{} samples too short for pooling {}x{}",
                self.samples, self.pool1, self.pool2
            )));
        }
        if self.separable_kernel > after_pool1 {
            return Err(Error::Config(format!(
                "separable kernel {} exceeds {after_pool1} pooled samples",
                self.separable_kernel
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_derived_extents() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.fused_maps(), 49);
        assert_eq!(c.flat_features(), 496);
        assert_eq!(
            c.clone().with_variant(Variant::NoTransformer).fused_maps(),
            48
        );
        assert_eq!(
            c.clone().with_variant(Variant::NoMultiscale).fused_maps(),
            9
        );
        assert_eq!(c.with_variant(Variant::EegnetBaseline).fused_maps(), 8);
    }

    #[test]
    fn rejects_invalid_fields() {
        let bad = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.classes = 1));
        assert!(bad(&|c| c.branch_kernels = vec![5, 8]));
        assert!(bad(&|c| c.branch_kernels = vec![1001]));
        assert!(bad(&|c| c.channels = 31));
        assert!(bad(&|c| c.samples = 20));
        assert!(bad(&|c| c.branch_dropout = 1.0));
        assert!(bad(&|c| c.channels = 0));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}

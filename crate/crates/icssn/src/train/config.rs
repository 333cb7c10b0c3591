//! The run configuration file: one TOML document with a section per
//! subsystem.  Every key has a default, so an empty document is a valid
//! full-scale configuration and desk-scale runs override only what they
//! need.

use super::TrainingConfig;
use crate::classifier::ClassifierConfig;
use crate::data::{SplitRatios, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::segmenter::{SamplingStrategy, SegLossConfig, SegmenterConfig};
use crate::{IcssnError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// `[data]`: tile geometry, split ratios, and the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Side length of every sample; [`DataSection::synth_config`] overrides
    /// the generator's own `tile_size` with this value.
    pub tile_size: usize,
    /// Train/val/test proportions.
    pub split: SplitRatios,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            tile_size: 512,
            split: SplitRatios::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// `[segmentation]`: decoder regularisation and loss weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationSection {
    pub dropout: f64,
    /// Contrastive weight λ in `loss = cross_entropy + λ · contrastive`.
    pub lambda: f64,
    /// Contrastive temperature τ.
    pub tau: f64,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        SegmentationSection {
            dropout: 0.1,
            lambda: 0.1,
            tau: 0.1,
        }
    }
}

/// `[socl]`: block labelling thresholds and pair-sampling policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SoclSection {
    pub strategy: SamplingStrategy,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Block edge in mask pixels.
    pub block: usize,
    /// Positive band: `lo ≤ count ≤ hi` class-1 pixels per block.
    pub lo: usize,
    pub hi: usize,
}

impl Default for SoclSection {
    fn default() -> Self {
        let d = SegLossConfig::default();
        SoclSection {
            strategy: d.strategy,
            n_pos: d.n_pos,
            n_neg: d.n_neg,
            block: d.block,
            lo: d.lo,
            hi: d.hi,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub segmentation: SegmentationSection,
    pub socl: SoclSection,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serialises to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Short stable digest of the full configuration, recorded in
    /// checkpoints so resumed runs can detect a mismatched config.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in &digest[..8] {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.tile_size == 0 || self.data.tile_size % 8 != 0 {
            return Err(IcssnError::Config(format!(
                "data.tile_size {} must be a positive multiple of 8",
                self.data.tile_size
            )));
        }
        if self.data.tile_size % self.socl.block != 0 {
            return Err(IcssnError::Config(format!(
                "socl.block {} must divide data.tile_size {}",
                self.socl.block, self.data.tile_size
            )));
        }
        if !(0.0..1.0).contains(&self.segmentation.dropout) {
            return Err(IcssnError::Config(format!(
                "segmentation.dropout {} must lie in [0, 1)",
                self.segmentation.dropout
            )));
        }
        self.encoder.validate()?;
        self.classifier.validate()?;
        self.seg_loss_config().validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// The `[segmentation]` + `[socl]` keys assembled into the loss config.
    pub fn seg_loss_config(&self) -> SegLossConfig {
        SegLossConfig {
            lambda: self.segmentation.lambda,
            tau: self.segmentation.tau,
            n_pos: self.socl.n_pos,
            n_neg: self.socl.n_neg,
            strategy: self.socl.strategy,
            block: self.socl.block,
            lo: self.socl.lo,
            hi: self.socl.hi,
        }
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            dropout: self.segmentation.dropout,
        }
    }

    /// Generator config with `tile_size` forced to `data.tile_size`.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            tile_size: self.data.tile_size,
            ..self.data.synth.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{HeadKind, Pooling};

    #[test]
    fn empty_document_yields_every_documented_default() {
        let cfg = RunConfig::from_toml_str("").unwrap();

        assert_eq!(cfg.data.tile_size, 512);
        assert_eq!(cfg.data.split, SplitRatios { train: 6, val: 2, test: 2 });

        assert_eq!(cfg.encoder.backbone_depth, 101);
        assert_eq!(cfg.encoder.output_channels, 256);
        assert_eq!(cfg.encoder.aspp_dilations, vec![1, 6, 12, 18]);
        assert_eq!(cfg.encoder.se_reduction, 16);

        assert_eq!(cfg.classifier.hidden_units, 256);
        assert_eq!(cfg.classifier.fc_layers, 2);
        assert_eq!(cfg.classifier.pooling, Pooling::Max);
        assert_eq!(cfg.classifier.head, HeadKind::Joint4);

        assert_eq!(cfg.segmentation.lambda, 0.1);
        assert_eq!(cfg.segmentation.tau, 0.1);
        assert_eq!(cfg.socl.strategy, SamplingStrategy::Edge);
        assert_eq!((cfg.socl.n_pos, cfg.socl.n_neg), (64, 64));
        assert_eq!((cfg.socl.block, cfg.socl.lo, cfg.socl.hi), (8, 7, 57));

        let t = &cfg.training;
        assert_eq!(t.optimizer, "sgd");
        assert_eq!(t.momentum, 0.9);
        assert_eq!(t.lr_classification, 0.001);
        assert_eq!(t.lr_segmentation, 0.007);
        assert_eq!(t.weight_decay, 0.0005);
        assert_eq!(t.batch_size, 4);
        assert_eq!(t.workers, 4);
        assert_eq!(t.schedule, "cosine");
        assert_eq!(t.epochs_classification, 50);
        assert_eq!(t.epochs_segmentation, 100);
        assert_eq!(t.max_rounds, 3);
        assert_eq!(t.patience, 8);
    }

    #[test]
    fn partial_overrides_keep_the_rest_at_defaults() {
        let cfg = RunConfig::from_toml_str(
            "[data]\ntile_size = 128\n\n[training]\nbatch_size = 2\nmax_rounds = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.data.tile_size, 128);
        assert_eq!(cfg.training.batch_size, 2);
        assert_eq!(cfg.training.max_rounds, 2);
        assert_eq!(cfg.training.lr_segmentation, 0.007);
        assert_eq!(cfg.encoder.backbone_depth, 101);
    }

    #[test]
    fn toml_roundtrip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.data.tile_size = 128;
        cfg.socl.strategy = SamplingStrategy::Hybrid;
        cfg.training.epochs_classification = 5;
        let text = cfg.to_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.socl.strategy, SamplingStrategy::Hybrid);
    }

    #[test]
    fn hash_tracks_content_not_identity() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.training.patience = 9;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn cross_section_constraints_are_enforced() {
        // Block must divide the tile size.
        let err = RunConfig::from_toml_str("[data]\ntile_size = 96\n\n[socl]\nblock = 7\n");
        assert!(err.is_err());
        // Invalid optimizer name.
        assert!(RunConfig::from_toml_str("[training]\noptimizer = \"adam\"\n").is_err());
        // Negative lambda.
        assert!(RunConfig::from_toml_str("[segmentation]\nlambda = -1.0\n").is_err());
        // se_reduction must divide output_channels.
        assert!(RunConfig::from_toml_str("[encoder]\nse_reduction = 7\n").is_err());
    }

    #[test]
    fn synth_config_inherits_the_tile_size() {
        let cfg =
            RunConfig::from_toml_str("[data]\ntile_size = 64\n\n[data.synth]\ntile_size = 512\n")
                .unwrap();
        assert_eq!(cfg.synth_config().tile_size, 64);
    }
}

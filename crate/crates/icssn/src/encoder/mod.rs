//! The shared feature extractor: residual backbone (layers-2/4 concat),
//! ASPP multi-scale fusion, and SE channel recalibration, producing features
//! at 1/8 of the input resolution.
//!
//! Both the classification and the segmentation branch run their inputs
//! through one of these; weight sharing is structural — the two branches
//! read the same `encoder/...` entries of a parameter store, so equal
//! inputs give bit-identical features by construction.

mod aspp;
mod backbone;
mod se;

pub use aspp::{Aspp, AsppCache};
pub use backbone::{Backbone, BackboneCache, SUPPORTED_DEPTHS};
pub use se::{SeCache, SqueezeExcite};

use crate::data::Tile;
use crate::nn::{concat_channels, concat_channels_backward, Mode, Params};
use crate::{IcssnError, Result};
use ndarray::{Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Output stride of the encoder: features live at 1/8 input resolution.
pub const OUTPUT_STRIDE: usize = 8;

/// Architecture knobs for the shared encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Residual depth: 18, 50, or 101.
    pub backbone_depth: usize,
    /// Stem width; stages use 1/2/4/8 multiples.  64 reproduces the
    /// standard residual family; small values give desk-scale models.
    pub base_width: usize,
    /// Channels of the fused feature map (C).
    pub output_channels: usize,
    /// ASPP branch dilation rates (rate 1 acts as a plain 1×1).
    pub aspp_dilations: Vec<usize>,
    /// SE bottleneck reduction ratio; must divide `output_channels`.
    pub se_reduction: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone_depth: 101,
            base_width: 64,
            output_channels: 256,
            aspp_dilations: vec![1, 6, 12, 18],
            se_reduction: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_DEPTHS.contains(&self.backbone_depth) {
            return Err(IcssnError::Config(format!(
                "backbone_depth {} unsupported (choose one of {SUPPORTED_DEPTHS:?})",
                self.backbone_depth
            )));
        }
        if self.base_width == 0 {
            return Err(IcssnError::Config("base_width must be positive".into()));
        }
        if self.output_channels == 0 {
            return Err(IcssnError::Config("output_channels must be positive".into()));
        }
        if self.aspp_dilations.is_empty() {
            return Err(IcssnError::Config("aspp_dilations must be non-empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &d in &self.aspp_dilations {
            if d == 0 {
                return Err(IcssnError::Config("aspp_dilations must be positive".into()));
            }
            if !seen.insert(d) {
                return Err(IcssnError::Config(format!("aspp dilation {d} listed twice")));
            }
        }
        if self.se_reduction == 0 || self.output_channels % self.se_reduction != 0 {
            return Err(IcssnError::Config(format!(
                "se_reduction {} must divide output_channels {}",
                self.se_reduction, self.output_channels
            )));
        }
        Ok(())
    }
}

/// Fused features for a single tile, `(H/8, W/8, C)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f64>,
}

/// Backbone → concat(f2, f4) → ASPP → SE.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    backbone: Backbone,
    aspp: Aspp,
    se: SqueezeExcite,
}

#[derive(Debug)]
pub struct EncoderCache {
    backbone: BackboneCache,
    f2_channels: usize,
    aspp: AsppCache,
    se: SeCache,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new("encoder/backbone", config.backbone_depth, config.base_width)?;
        let aspp = Aspp::new(
            "encoder/aspp",
            backbone.f2_channels() + backbone.f4_channels(),
            config.output_channels,
            &config.aspp_dilations,
        )?;
        let se = SqueezeExcite::new("encoder/se", config.output_channels, config.se_reduction)?;
        Ok(Encoder {
            config,
            backbone,
            aspp,
            se,
        })
    }

    /// Registers every `encoder/...` parameter in `params`.
    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.backbone.declare(params, rng);
        self.aspp.declare(params, rng);
        self.se.declare(params, rng);
    }

    /// Channels entering ASPP (the f2 ⊕ f4 concat width).
    pub fn concat_channels(&self) -> usize {
        self.backbone.f2_channels() + self.backbone.f4_channels()
    }

    /// Batched forward: `(N, 3, H, W) → (N, C, H/8, W/8)`.
    pub fn forward(
        &self,
        params: &mut Params,
        x: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array4<f64>, EncoderCache)> {
        let (f2, f4, bb_cache) = self.backbone.forward(params, x, mode)?;
        let f2_channels = f2.dim().1;
        let fused = concat_channels(&f2, &f4);
        let (fused, aspp_cache) = self.aspp.forward(params, &fused, mode);
        let (out, se_cache) = self.se.forward(params, &fused);
        debug_assert!(out.iter().all(|v| v.is_finite()), "encoder produced non-finite values");
        Ok((
            out,
            EncoderCache {
                backbone: bb_cache,
                f2_channels,
                aspp: aspp_cache,
                se: se_cache,
            },
        ))
    }

    /// Backpropagates to the input tile (the return value is rarely used;
    /// the call's purpose is accumulating parameter gradients).
    pub fn backward(
        &self,
        params: &mut Params,
        cache: &EncoderCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let g = self.se.backward(params, &cache.se, gy);
        let g = self.aspp.backward(params, &cache.aspp, &g);
        let (g_f2, g_f4) = concat_channels_backward(&g, cache.f2_channels);
        self.backbone.backward(params, &cache.backbone, &g_f2, &g_f4)
    }

    /// Single-tile convenience: encode one preprocessed tile to a
    /// `(H/8, W/8, C)` feature map (eval-mode batch statistics).
    pub fn encode(&self, params: &mut Params, tile: &Tile) -> Result<FeatureMap> {
        let chw = tile.to_chw_f64();
        let (c, h, w) = chw.dim();
        let x = chw.into_shape_with_order((1, c, h, w)).expect("adding batch axis");
        let (y, _) = self.forward(params, &x, Mode::Eval)?;
        let (_, ch, oh, ow) = y.dim();
        let mut values = Array3::zeros((oh, ow, ch));
        for cc in 0..ch {
            for yy in 0..oh {
                for xx in 0..ow {
                    values[[yy, xx, cc]] = y[[0, cc, yy, xx]];
                }
            }
        }
        Ok(FeatureMap { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use ndarray::Array3 as A3;
    use rand::Rng;

    fn desk_config() -> EncoderConfig {
        EncoderConfig {
            backbone_depth: 18,
            base_width: 4,
            output_channels: 8,
            aspp_dilations: vec![1, 2],
            se_reduction: 4,
        }
    }

    fn built() -> (Encoder, Params) {
        let enc = Encoder::new(desk_config()).unwrap();
        let mut params = Params::new();
        let mut rng = rng_for(31, "enc/init", &[]);
        enc.declare(&mut params, &mut rng);
        (enc, params)
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = desk_config();
        c.backbone_depth = 34;
        assert!(c.validate().is_err());
        let mut c = desk_config();
        c.se_reduction = 3;
        assert!(c.validate().is_err());
        let mut c = desk_config();
        c.aspp_dilations = vec![1, 1];
        assert!(c.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn encode_produces_one_eighth_feature_maps() {
        let (enc, mut params) = built();
        let mut rng = rng_for(32, "enc/tile", &[]);
        let pixels = A3::from_shape_fn((32, 32, 3), |_| rng.random_range(0..=255u32) as u8);
        let tile = Tile::new(pixels, 2.0).unwrap();
        let fm = enc.encode(&mut params, &tile).unwrap();
        assert_eq!(fm.values.dim(), (4, 4, 8));
        assert!(fm.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_indivisible_tiles() {
        let (enc, mut params) = built();
        let pixels = A3::from_elem((20, 20, 3), 128u8);
        let tile = Tile::new(pixels, 2.0).unwrap();
        assert!(enc.encode(&mut params, &tile).is_err());
    }

    #[test]
    fn shared_parameters_give_bit_identical_outputs() {
        // Two encoder instances over the same store — the siamese contract.
        let (enc_a, mut params) = built();
        let enc_b = Encoder::new(desk_config()).unwrap();
        let mut rng = rng_for(33, "enc/share", &[]);
        let x = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.random_range(-1.0..1.0));
        let (ya, _) = enc_a.forward(&mut params, &x, Mode::Eval).unwrap();
        let (yb, _) = enc_b.forward(&mut params, &x, Mode::Eval).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn namespaces_cover_backbone_aspp_and_se() {
        let (_, params) = built();
        assert!(params.count_prefix("encoder/backbone/") > 0);
        assert!(params.count_prefix("encoder/aspp/") > 0);
        assert!(params.count_prefix("encoder/se/") > 0);
        assert_eq!(
            params.count_prefix("encoder/"),
            params.count_prefix("encoder/backbone/")
                + params.count_prefix("encoder/aspp/")
                + params.count_prefix("encoder/se/")
        );
    }

    #[test]
    fn gradients_flow_to_every_trainable_encoder_parameter() {
        let (enc, mut params) = built();
        let mut rng = rng_for(34, "enc/grad", &[]);
        let x = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = enc.forward(&mut params, &x, Mode::Train).unwrap();
        let obj = Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        params.zero_grads();
        enc.backward(&mut params, &cache, &obj);
        let mut missing = Vec::new();
        for name in params.names_with_prefix("encoder/") {
            let p = params.get_param(&name);
            if p.trainable && p.grad.iter().all(|&g| g == 0.0) {
                missing.push(name);
            }
        }
        assert!(missing.is_empty(), "no gradient reached: {missing:?}");
    }
}

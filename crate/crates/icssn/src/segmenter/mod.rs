//! The SOCL-augmented segmentation branch: shared encoder, transposed-conv
//! decoder, block-label derivation, and the combined loss.

mod decoder;
mod loss;
mod socl;

pub use decoder::{Decoder, DecoderCache};
pub use loss::{
    contrastive_with_grad, pixel_ce_with_grad, pixel_cross_entropy, segmentation_loss,
    segmentation_loss_batch, segmentation_loss_with_grad, supervised_contrastive_loss,
    SegLossParts, CE_EPSILON,
};
pub use socl::{
    derive_socl_labels, select_socl_pairs, select_socl_pairs_chw, BlockLabel, SamplingStrategy,
    SoclGrid, SoclPairBatch, SoclVector, DEFAULT_BLOCK, DEFAULT_HI, DEFAULT_LO,
};

use crate::data::{Mask, Tile};
use crate::encoder::{Encoder, EncoderCache, FeatureMap};
use crate::nn::{Mode, Params};
use crate::{IcssnError, Result};
use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Weights, temperature, sampling budget, and block thresholds of the
/// combined segmentation loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegLossConfig {
    /// Contrastive weight λ; 0 recovers the plain cross-entropy baseline.
    pub lambda: f64,
    /// Contrastive temperature τ.
    pub tau: f64,
    /// Positive sampling budget per tile.
    pub n_pos: usize,
    /// Negative sampling budget per tile.
    pub n_neg: usize,
    /// Which blocks act as positives.
    pub strategy: SamplingStrategy,
    /// Block edge in mask pixels (8 matches the 1/8 feature stride).
    pub block: usize,
    /// Positive band lower bound (inclusive, class-1 pixels per block).
    pub lo: usize,
    /// Positive band upper bound (inclusive).
    pub hi: usize,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        SegLossConfig {
            lambda: 0.1,
            tau: 0.1,
            n_pos: 64,
            n_neg: 64,
            strategy: SamplingStrategy::Edge,
            block: DEFAULT_BLOCK,
            lo: DEFAULT_LO,
            hi: DEFAULT_HI,
        }
    }
}

impl SegLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(IcssnError::Config(format!(
                "lambda {} must be a nonnegative real",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(IcssnError::Config(format!(
                "tau {} must be positive",
                self.tau
            )));
        }
        if self.n_pos == 0 || self.n_neg == 0 {
            return Err(IcssnError::Config(
                "n_pos and n_neg must be at least 1".into(),
            ));
        }
        if self.block == 0 || self.lo > self.hi || self.hi > self.block * self.block {
            return Err(IcssnError::Config(format!(
                "block thresholds lo={}, hi={} invalid for block {}",
                self.lo, self.hi, self.block
            )));
        }
        Ok(())
    }
}

/// Decoder knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// Dropout rate after each transposed-convolution stage.
    pub dropout: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { dropout: 0.1 }
    }
}

/// The segmentation head over a shared encoder.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    decoder: Decoder,
}

pub struct SegmenterCache {
    enc: EncoderCache,
    /// Encoder output, kept for the contrastive term's feature gradient.
    pub feats: Array4<f64>,
    dec: DecoderCache,
}

impl Segmenter {
    pub fn new(encoder_channels: usize, config: SegmenterConfig) -> Result<Self> {
        let decoder = Decoder::new("decoder", encoder_channels, config.dropout)?;
        Ok(Segmenter { config, decoder })
    }

    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.decoder.declare(params, rng);
    }

    /// Tiles `(N, 3, H, W)` → logits `(N, 2, H, W)`.
    pub fn forward(
        &self,
        encoder: &Encoder,
        params: &mut Params,
        tiles: &Array4<f64>,
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<(Array4<f64>, SegmenterCache)> {
        self.forward_split(encoder, params, tiles, mode, mode, dropout_rng)
    }

    /// [`Segmenter::forward`] with independent encoder/decoder modes.  The
    /// warm-up phases run the frozen encoder in eval mode (so its batch-norm
    /// statistics stay put) while the decoder still trains.
    pub fn forward_split(
        &self,
        encoder: &Encoder,
        params: &mut Params,
        tiles: &Array4<f64>,
        encoder_mode: Mode,
        decoder_mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<(Array4<f64>, SegmenterCache)> {
        let (feats, enc) = encoder.forward(params, tiles, encoder_mode)?;
        let (logits, dec) = self
            .decoder
            .forward(params, &feats, decoder_mode, dropout_rng);
        Ok((logits, SegmenterCache { enc, feats, dec }))
    }

    /// Backpropagates the loss gradients.  `dlogits` flows through the
    /// decoder; `dfeats` (the contrastive term's contribution) joins the
    /// decoder's feature gradient before entering the encoder.  With
    /// `update_encoder == false` the walk stops at the feature map.
    pub fn backward(
        &self,
        encoder: &Encoder,
        params: &mut Params,
        cache: &SegmenterCache,
        dlogits: &Array4<f64>,
        dfeats: Option<&Array4<f64>>,
        update_encoder: bool,
    ) {
        let g_feat = self.decoder.backward(params, &cache.dec, dlogits);
        if update_encoder {
            let total = match dfeats {
                Some(extra) => &g_feat + extra,
                None => g_feat,
            };
            encoder.backward(params, &cache.enc, &total);
        }
    }

    /// Gradient of an arbitrary logit functional w.r.t. the encoder feature
    /// map, `(N, C, h, w)`.  `dlogits` is the functional's gradient at the
    /// decoder logits.  Decoder parameter gradients are accumulated as a
    /// side effect; the encoder is left untouched.
    pub fn feature_gradient(
        &self,
        params: &mut Params,
        cache: &SegmenterCache,
        dlogits: &Array4<f64>,
    ) -> Array4<f64> {
        self.decoder.backward(params, &cache.dec, dlogits)
    }

    /// Decodes a single feature map to `(H, W, 2)` logits (eval mode).
    pub fn decode(&self, params: &mut Params, f: &FeatureMap) -> Result<Array3<f64>> {
        let (h, w, c) = f.values.dim();
        let chw: Array3<f64> = f
            .values
            .clone()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned();
        let batch = chw
            .into_shape_with_order((1, c, h, w))
            .expect("adding batch axis");
        let mut rng = crate::seed::rng_for(0, "decode/eval", &[]);
        let (logits, _) = self.decoder.forward(params, &batch, Mode::Eval, &mut rng);
        let (_, _, oh, ow) = logits.dim();
        let mut out = Array3::zeros((oh, ow, 2));
        for ch in 0..2 {
            for y in 0..oh {
                for x in 0..ow {
                    out[[y, x, ch]] = logits[[0, ch, y, x]];
                }
            }
        }
        Ok(out)
    }

    /// Full-pipeline single-tile prediction: per-pixel argmax mask.
    pub fn predict(
        &self,
        encoder: &Encoder,
        params: &mut Params,
        tile: &Tile,
    ) -> Result<Mask> {
        let x = crate::data::batch_tiles(&[tile])?;
        let mut rng = crate::seed::rng_for(0, "predict/eval", &[]);
        let (logits, _) = self.forward(encoder, params, &x, Mode::Eval, &mut rng)?;
        let (_, _, h, w) = logits.dim();
        let labels = Array2::from_shape_fn((h, w), |(y, xx)| {
            u8::from(logits[[0, 1, y, xx]] > logits[[0, 0, y, xx]])
        });
        Mask::new(labels)
    }
}

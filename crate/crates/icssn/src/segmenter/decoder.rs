//! Transposed-convolution decoder: ×8 upsampling in two stages, then a 1×1
//! projection onto the two classes.

use crate::nn::{
    dropout, dropout_backward, relu, relu_backward, BatchNorm2d, BatchNormCache, Conv2d,
    Conv2dCache, ConvTranspose2d, ConvTranspose2dCache, DropoutCache, Mode, Params,
};
use crate::{IcssnError, Result};
use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

/// Two stacked transposed convolutions (stride 4, then stride 2), each
/// followed by batch normalization, ReLU, and dropout; a bias-carrying 1×1
/// convolution produces the two-class logits.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub in_ch: usize,
    pub dropout: f64,
    ct1: ConvTranspose2d,
    bn1: BatchNorm2d,
    ct2: ConvTranspose2d,
    bn2: BatchNorm2d,
    proj: Conv2d,
}

#[derive(Debug)]
pub struct DecoderCache {
    ct1: ConvTranspose2dCache,
    bn1: BatchNormCache,
    relu1: Array4<f64>,
    drop1: DropoutCache,
    ct2: ConvTranspose2dCache,
    bn2: BatchNormCache,
    relu2: Array4<f64>,
    drop2: DropoutCache,
    proj: Conv2dCache,
}

impl Decoder {
    pub fn new(name: &str, in_ch: usize, dropout: f64) -> Result<Self> {
        if in_ch < 4 || in_ch % 4 != 0 {
            return Err(IcssnError::Config(format!(
                "decoder input channels {in_ch} must be a positive multiple of 4"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(IcssnError::Config(format!(
                "dropout rate {dropout} outside [0, 1)"
            )));
        }
        let mid = in_ch / 2;
        let low = in_ch / 4;
        Ok(Decoder {
            in_ch,
            dropout,
            ct1: ConvTranspose2d::new(format!("{name}/ct1"), in_ch, mid, 8, 4, 2),
            bn1: BatchNorm2d::new(format!("{name}/ct1/bn"), mid),
            ct2: ConvTranspose2d::new(format!("{name}/ct2"), mid, low, 4, 2, 1),
            bn2: BatchNorm2d::new(format!("{name}/ct2/bn"), low),
            proj: Conv2d::new(format!("{name}/proj"), low, 2, 1, 1, 0).with_bias(),
        })
    }

    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.ct1.declare(params, rng);
        self.bn1.declare(params);
        self.ct2.declare(params, rng);
        self.bn2.declare(params);
        self.proj.declare(params, rng);
    }

    /// `(N, C, h, w) → (N, 2, 8h, 8w)`.  Dropout draws from `rng` in train
    /// mode and is inert in eval mode.
    pub fn forward(
        &self,
        params: &mut Params,
        f: &Array4<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> (Array4<f64>, DecoderCache) {
        let train = mode == Mode::Train;
        let (y, ct1) = self.ct1.forward(params, f);
        let (y, bn1) = self.bn1.forward(params, &y, mode);
        let (y, relu1) = relu(&y);
        let (y, drop1) = dropout(&y, self.dropout, train, rng);
        let (y, ct2) = self.ct2.forward(params, &y);
        let (y, bn2) = self.bn2.forward(params, &y, mode);
        let (y, relu2) = relu(&y);
        let (y, drop2) = dropout(&y, self.dropout, train, rng);
        let (y, proj) = self.proj.forward(params, &y);
        (
            y,
            DecoderCache {
                ct1,
                bn1,
                relu1,
                drop1,
                ct2,
                bn2,
                relu2,
                drop2,
                proj,
            },
        )
    }

    /// Accumulates parameter gradients and returns the feature gradient.
    pub fn backward(
        &self,
        params: &mut Params,
        cache: &DecoderCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let g = self.proj.backward(params, &cache.proj, gy);
        let g = dropout_backward(&cache.drop2, &g);
        let g = relu_backward(&cache.relu2, &g);
        let g = self.bn2.backward(params, &cache.bn2, &g);
        let g = self.ct2.backward(params, &cache.ct2, &g);
        let g = dropout_backward(&cache.drop1, &g);
        let g = relu_backward(&cache.relu1, &g);
        let g = self.bn1.backward(params, &cache.bn1, &g);
        self.ct1.backward(params, &cache.ct1, &g)
    }
}

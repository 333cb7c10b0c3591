//! Squeeze-and-excitation channel recalibration.

use super::super::nn::{
    broadcast_spatial, broadcast_spatial_backward, global_avg_pool, global_avg_pool_backward,
    relu, relu_backward, sigmoid, sigmoid_backward, Linear, LinearCache, Params,
};
use crate::{IcssnError, Result};
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

/// Global squeeze → bottleneck (÷`reduction`) → sigmoid gates → channel scale.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub channels: usize,
    pub reduction: usize,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug)]
pub struct SeCache {
    x: Array4<f64>,
    fc1: LinearCache,
    relu_mask: Array2<f64>,
    fc2: LinearCache,
    gates: Array2<f64>,
}

impl SqueezeExcite {
    pub fn new(name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(IcssnError::Config(format!(
                "se reduction {reduction} must divide the channel count {channels}"
            )));
        }
        Ok(SqueezeExcite {
            channels,
            reduction,
            fc1: Linear::new(format!("{name}/fc1"), channels, channels / reduction),
            fc2: Linear::new(format!("{name}/fc2"), channels / reduction, channels),
        })
    }

    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.fc1.declare(params, rng);
        self.fc2.declare(params, rng);
    }

    /// Returns the recalibrated map; the gates live strictly inside (0, 1).
    pub fn forward(&self, params: &Params, x: &Array4<f64>) -> (Array4<f64>, SeCache) {
        let (_, _, h, w) = x.dim();
        let squeezed = global_avg_pool(x);
        let (z, fc1) = self.fc1.forward(params, &squeezed);
        let (z, relu_mask) = relu(&z);
        let (z, fc2) = self.fc2.forward(params, &z);
        let gates = sigmoid(&z);
        let y = x * &broadcast_spatial(&gates, h, w);
        (
            y,
            SeCache {
                x: x.clone(),
                fc1,
                relu_mask,
                fc2,
                gates,
            },
        )
    }

    /// Per-channel gate values for the given input (diagnostic view).
    pub fn gates(&self, params: &Params, x: &Array4<f64>) -> Array2<f64> {
        let (_, cache) = self.forward(params, x);
        cache.gates
    }

    pub fn backward(&self, params: &mut Params, cache: &SeCache, gy: &Array4<f64>) -> Array4<f64> {
        let (_, _, h, w) = gy.dim();
        // y = x ⊙ broadcast(g): split the product rule.
        let dx_direct = gy * &broadcast_spatial(&cache.gates, h, w);
        let dgates = broadcast_spatial_backward(&(gy * &cache.x));
        let dz = sigmoid_backward(&cache.gates, &dgates);
        let dz = self.fc2.backward(params, &cache.fc2, &dz);
        let dz = relu_backward(&cache.relu_mask, &dz);
        let dsqueezed = self.fc1.backward(params, &cache.fc1, &dz);
        &dx_direct + &global_avg_pool_backward(cache.x.dim(), &dsqueezed)
    }
}

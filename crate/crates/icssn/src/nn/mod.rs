//! A small deterministic `f64` neural-network core on `ndarray`.
//!
//! Layers are plain structs naming their parameters inside a flat [`Params`]
//! store (`encoder/backbone/stem/conv/weight`, …).  Forward passes return an
//! explicit cache; backward passes consume it, accumulate parameter
//! gradients, and return the input gradient.  Keeping parameters in one
//! namespace makes the two ICSSN requirements that drove this design
//! trivial: siamese weight sharing (both encoder applications read the same
//! entries) and encoder transfer between branches (copy a name prefix).
//!
//! Everything runs sequentially in double precision, so forward passes,
//! losses, and training steps are bit-reproducible given a seed.

mod conv;
mod gradcheck;
mod im2col;
mod linear;
mod norm;
mod ops;

pub use conv::{Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
pub use gradcheck::{central_diff, max_rel_error};
pub use im2col::{col2im, conv_out_size, im2col};
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm2d, BatchNormCache};
pub use ops::{
    bilinear_resize, broadcast_spatial, broadcast_spatial_backward, concat_channels,
    concat_channels_backward, dropout, dropout_backward, global_avg_pool,
    global_avg_pool_backward, global_max_pool, global_max_pool_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, softmax_rows, DropoutCache, MaxPool2d, MaxPoolCache,
};

use crate::error::{IcssnError, Result};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Train vs. eval behaviour for layers that differ between the two
/// (batch norm statistics, dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One named tensor: value, accumulated gradient, and whether the optimizer
/// may update it (running statistics are stored non-trainable).
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

/// Flat name → tensor store for a whole model.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: IndexMap<String, Param>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    /// Registers a tensor. Duplicate names are a programming error: layers
    /// declare their parameters exactly once.
    pub fn declare(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) {
        let grad = ArrayD::zeros(value.raw_dim());
        let prev = self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        );
        assert!(prev.is_none(), "parameter `{name}` declared twice");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Borrow a full entry (value, gradient, trainability).
    pub fn get_param(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Borrow a value. Missing names are a programming error.
    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    /// Replaces a value, checking shape compatibility.
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| {
            IcssnError::invalid("Params::set", format!("unknown parameter `{name}`"))
        })?;
        if entry.value.shape() != value.shape() {
            return Err(IcssnError::shape(
                "Params::set",
                format!(
                    "`{name}`: stored {:?} vs incoming {:?}",
                    entry.value.shape(),
                    value.shape()
                ),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .grad
    }

    /// Adds a gradient contribution (shapes must match the value).
    pub fn accumulate_grad(&mut self, name: &str, delta: &ArrayD<f64>) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        debug_assert_eq!(entry.value.shape(), delta.shape(), "grad shape for `{name}`");
        entry.grad += delta;
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Names carrying `prefix`, sorted for deterministic comparisons.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        let mut names: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        names.sort();
        names
    }

    /// Number of scalar values under a prefix (all parameters).
    pub fn count_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len() as u64)
            .sum()
    }

    /// Number of trainable scalar values under a prefix.
    pub fn trainable_count_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(k, p)| k.starts_with(prefix) && p.trainable)
            .map(|(_, p)| p.value.len() as u64)
            .sum()
    }

    /// SHA-256 over the names and raw bytes of every entry under `prefix`,
    /// in sorted-name order. Bit-exact state fingerprint.
    pub fn hash_prefix(&self, prefix: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for name in self.names_with_prefix(prefix) {
            hasher.update(name.as_bytes());
            hasher.update([0]);
            let param = &self.entries[&name];
            for &v in param.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Copies every `prefix` entry from `src` into `self`.
    ///
    /// The two stores must hold structurally identical namespaces under the
    /// prefix; any divergence is reported by name.
    pub fn copy_prefix_from(&mut self, src: &Params, prefix: &str) -> Result<()> {
        let src_names = src.names_with_prefix(prefix);
        let dst_names = self.names_with_prefix(prefix);
        if src_names != dst_names {
            let missing: Vec<&String> =
                src_names.iter().filter(|n| !dst_names.contains(n)).collect();
            let extra: Vec<&String> =
                dst_names.iter().filter(|n| !src_names.contains(n)).collect();
            return Err(IcssnError::invalid(
                "Params::copy_prefix_from",
                format!(
                    "namespace `{prefix}` differs: missing in dst {missing:?}, extra in dst {extra:?}"
                ),
            ));
        }
        for name in src_names {
            let value = src.get(&name).clone();
            self.set(&name, value)?;
        }
        Ok(())
    }
}

/// He-normal initialisation: `N(0, sqrt(2 / fan_in))`, the standard scaled
/// random init for ReLU networks (no pretrained weights ship with the crate).
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        // Box–Muller from two uniform draws; deterministic given the stream.
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use ndarray::ArrayD;

    fn arr(shape: &[usize], fill: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), fill)
    }

    #[test]
    fn declare_get_set_roundtrip() {
        let mut p = Params::new();
        p.declare("a/w", arr(&[2, 3], 1.0), true);
        assert_eq!(p.get("a/w").len(), 6);
        p.set("a/w", arr(&[2, 3], 2.0)).unwrap();
        assert_eq!(p.get("a/w")[[0, 0]], 2.0);
        assert!(p.set("a/w", arr(&[3, 2], 0.0)).is_err());
    }

    #[test]
    #[should_panic(expected = "declared twice")]
    fn duplicate_declaration_panics() {
        let mut p = Params::new();
        p.declare("x", arr(&[1], 0.0), true);
        p.declare("x", arr(&[1], 0.0), true);
    }

    #[test]
    fn gradient_accumulation_adds() {
        let mut p = Params::new();
        p.declare("w", arr(&[2], 0.0), true);
        p.accumulate_grad("w", &arr(&[2], 1.5));
        p.accumulate_grad("w", &arr(&[2], 1.0));
        assert_eq!(p.grad("w")[[0]], 2.5);
        p.zero_grads();
        assert_eq!(p.grad("w")[[0]], 0.0);
    }

    #[test]
    fn prefix_hash_tracks_values_and_ignores_other_namespaces() {
        let mut p = Params::new();
        p.declare("enc/w", arr(&[2], 1.0), true);
        p.declare("head/w", arr(&[2], 1.0), true);
        let h0 = p.hash_prefix("enc/");
        p.set("head/w", arr(&[2], 9.0)).unwrap();
        assert_eq!(p.hash_prefix("enc/"), h0, "other namespace must not matter");
        p.set("enc/w", arr(&[2], 3.0)).unwrap();
        assert_ne!(p.hash_prefix("enc/"), h0);
    }

    #[test]
    fn prefix_copy_is_exact_and_structural() {
        let mut a = Params::new();
        a.declare("enc/w", arr(&[2, 2], 7.0), true);
        a.declare("enc/stats", arr(&[2], 0.25), false);
        a.declare("cls/w", arr(&[2], 1.0), true);
        let mut b = Params::new();
        b.declare("enc/w", arr(&[2, 2], 0.0), true);
        b.declare("enc/stats", arr(&[2], 0.0), false);
        b.declare("dec/w", arr(&[3], 5.0), true);

        b.copy_prefix_from(&a, "enc/").unwrap();
        assert_eq!(b.hash_prefix("enc/"), a.hash_prefix("enc/"));
        assert_eq!(b.get("dec/w")[[0]], 5.0, "other namespaces untouched");

        // Idempotent.
        b.copy_prefix_from(&a, "enc/").unwrap();
        assert_eq!(b.hash_prefix("enc/"), a.hash_prefix("enc/"));

        // Structural mismatch is named.
        let mut c = Params::new();
        c.declare("enc/w", arr(&[2, 2], 0.0), true);
        let err = c.copy_prefix_from(&a, "enc/").unwrap_err();
        assert!(err.to_string().contains("enc/stats"), "{err}");
    }

    #[test]
    fn he_normal_scale_is_plausible() {
        let mut rng = rng_for(0, "init", &[]);
        let w = he_normal(&mut rng, &[64, 32, 3, 3], 32 * 9);
        let n = w.len() as f64;
        let mean: f64 = w.iter().sum::<f64>() / n;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / (32.0 * 9.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var / expected - 1.0).abs() < 0.15, "var {var} vs {expected}");
    }
}

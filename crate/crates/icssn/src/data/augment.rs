//! Geometric augmentation: flips and right-angle rotations.

use super::{Mask, Sample, Tile};
use crate::error::{IcssnError, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// The augmentation alphabet. `Identity` exists so "original plus five
/// transforms" is expressible as one op list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Identity,
    Hflip,
    Vflip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugmentOp {
    /// Stable lowercase name, used in augmented sample ids and configs.
    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Identity => "identity",
            AugmentOp::Hflip => "hflip",
            AugmentOp::Vflip => "vflip",
            AugmentOp::Rot90 => "rot90",
            AugmentOp::Rot180 => "rot180",
            AugmentOp::Rot270 => "rot270",
        }
    }

    /// Parses an op name; unknown names are a configuration error.
    pub fn parse(name: &str) -> Result<Self> {
        standard_augmentations()
            .into_iter()
            .find(|op| op.name() == name)
            .ok_or_else(|| IcssnError::Config(format!("unknown augmentation op `{name}`")))
    }

    /// Source index `(sy, sx)` feeding output `(y, x)` in an `n×n` tile.
    fn source_index(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        match self {
            AugmentOp::Identity => (y, x),
            AugmentOp::Hflip => (y, n - 1 - x),
            AugmentOp::Vflip => (n - 1 - y, x),
            // Clockwise quarter turns.
            AugmentOp::Rot90 => (n - 1 - x, y),
            AugmentOp::Rot180 => (n - 1 - y, n - 1 - x),
            AugmentOp::Rot270 => (x, n - 1 - y),
        }
    }
}

/// Identity plus the five geometric transforms — the per-sample multiplicity
/// used for training/validation augmentation.
pub fn standard_augmentations() -> [AugmentOp; 6] {
    [
        AugmentOp::Identity,
        AugmentOp::Hflip,
        AugmentOp::Vflip,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
    ]
}

fn transform_tile(pixels: &Array3<u8>, op: AugmentOp) -> Array3<u8> {
    let n = pixels.dim().0;
    Array3::from_shape_fn(pixels.dim(), |(y, x, c)| {
        let (sy, sx) = op.source_index(y, x, n);
        pixels[[sy, sx, c]]
    })
}

fn transform_mask(labels: &Array2<u8>, op: AugmentOp) -> Array2<u8> {
    let n = labels.dim().0;
    Array2::from_shape_fn(labels.dim(), |(y, x)| {
        let (sy, sx) = op.source_index(y, x, n);
        labels[[sy, sx]]
    })
}

/// Applies the same geometric transform to tile and mask.
///
/// The id and object label are unchanged — transforms permute pixels, so the
/// label set is invariant; callers that keep several variants assign new ids.
pub fn augment_sample(sample: &Sample, op: AugmentOp) -> Sample {
    if op == AugmentOp::Identity {
        return sample.clone();
    }
    let tile = Tile {
        pixels: transform_tile(&sample.tile.pixels, op),
        resolution_m: sample.tile.resolution_m,
    };
    let mask = Mask {
        labels: transform_mask(&sample.mask.labels, op),
    };
    Sample::new(sample.id.clone(), tile, mask)
        .expect("square transforms preserve sample invariants")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DEFAULT_RESOLUTION_M;
    use crate::seed::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_sample(n: usize) -> Sample {
        let mut rng = rng_for(21, "augment", &[n as u64]);
        let pixels = Array3::from_shape_fn((n, n, 3), |_| rng.random());
        let labels = Array2::from_shape_fn((n, n), |_| u8::from(rng.random_bool(0.3)));
        Sample::new(
            "s0",
            Tile::new(pixels, DEFAULT_RESOLUTION_M).unwrap(),
            Mask::new(labels).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = random_sample(16);
        let back = augment_sample(&augment_sample(&s, AugmentOp::Hflip), AugmentOp::Hflip);
        assert_eq!(back, s);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let s = random_sample(16);
        let mut cur = s.clone();
        for _ in 0..4 {
            cur = augment_sample(&cur, AugmentOp::Rot90);
        }
        assert_eq!(cur, s);
    }

    #[test]
    fn vflip_moves_top_row_to_bottom() {
        let mut labels = Array2::zeros((8, 8));
        for x in 0..8 {
            labels[[0, x]] = 1;
        }
        let s = Sample::new(
            "top",
            Tile::new(Array3::zeros((8, 8, 3)), DEFAULT_RESOLUTION_M).unwrap(),
            Mask::new(labels).unwrap(),
        )
        .unwrap();
        let flipped = augment_sample(&s, AugmentOp::Vflip);
        for x in 0..8 {
            assert_eq!(flipped.mask.labels[[7, x]], 1);
            assert_eq!(flipped.mask.labels[[0, x]], 0);
        }
    }

    #[test]
    fn unknown_op_name_is_a_config_error() {
        assert!(AugmentOp::parse("rot45").is_err());
        assert_eq!(AugmentOp::parse("rot270").unwrap(), AugmentOp::Rot270);
    }

    proptest! {
        /// A marker written at the same coordinate in tile and mask stays
        /// co-located under every op: geometry never decouples the pair.
        #[test]
        fn tile_and_mask_stay_aligned(y in 0usize..12, x in 0usize..12, op_ix in 0usize..6) {
            let op = standard_augmentations()[op_ix];
            let mut pixels = Array3::zeros((12, 12, 3));
            pixels[[y, x, 0]] = 255;
            let mut labels = Array2::zeros((12, 12));
            labels[[y, x]] = 1;
            let s = Sample::new(
                "probe",
                Tile::new(pixels, DEFAULT_RESOLUTION_M).unwrap(),
                Mask::new(labels).unwrap(),
            )
            .unwrap();
            let t = augment_sample(&s, op);
            let tile_pos = t.tile.pixels.indexed_iter().find(|(_, &v)| v == 255).unwrap().0;
            let mask_pos = t.mask.labels.indexed_iter().find(|(_, &v)| v == 1).unwrap().0;
            prop_assert_eq!((tile_pos.0, tile_pos.1), mask_pos);
            prop_assert_eq!(t.object_label, s.object_label);
        }
    }
}

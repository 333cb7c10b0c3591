//! Dataset types, preprocessing, augmentation, splitting, synthesis, and
//! on-disk storage.
//!
//! Samples are square RGB tiles with binary masks (0 = slope/background,
//! 1 = landslide).  Every operation here is a pure function of its inputs
//! and an explicit seed, so datasets are bit-reproducible.

mod augment;
mod histeq;
mod split;
mod store;
mod synth;
mod tiling;

pub use augment::{augment_sample, standard_augmentations, AugmentOp};
pub use histeq::equalize_histogram;
pub use split::{split_dataset, SplitRatios};
pub use store::{load_dataset, save_dataset, LoadedDataset, Split};
pub use synth::{generate_synthetic_dataset, SynthConfig};
pub use tiling::{reflect_pad, tile_raster};

use crate::error::{IcssnError, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Ground resolution of the source imagery, meters per pixel.
pub const DEFAULT_RESOLUTION_M: f64 = 2.0;

/// One square RGB image tile, stored `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    /// 8-bit intensities, shape `(H, W, 3)`.
    pub pixels: Array3<u8>,
    /// Meters per pixel (metadata only; not used by the networks).
    pub resolution_m: f64,
}

impl Tile {
    /// Wraps pixel data, enforcing a square tile with exactly 3 channels.
    pub fn new(pixels: Array3<u8>, resolution_m: f64) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h != w {
            return Err(IcssnError::shape(
                "Tile::new",
                format!("tiles must be square, got {h}×{w}"),
            ));
        }
        if c != 3 {
            return Err(IcssnError::shape(
                "Tile::new",
                format!("tiles must have exactly 3 channels, got {c}"),
            ));
        }
        Ok(Tile {
            pixels,
            resolution_m,
        })
    }

    /// Side length in pixels.
    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    /// Converts to a `(3, H, W)` float array scaled to `[0, 1]`, the layout
    /// the networks consume.
    pub fn to_chw_f64(&self) -> Array3<f64> {
        let (h, w, _) = self.pixels.dim();
        let mut out = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[c, y, x]] = f64::from(self.pixels[[y, x, c]]) / 255.0;
                }
            }
        }
        out
    }
}

/// Stacks equal-sized tiles into an `(N, 3, H, W)` batch.
pub fn batch_tiles(tiles: &[&Tile]) -> Result<ndarray::Array4<f64>> {
    if tiles.is_empty() {
        return Err(IcssnError::invalid("batch_tiles", "empty batch"));
    }
    let size = tiles[0].size();
    for t in tiles {
        if t.size() != size {
            return Err(IcssnError::shape(
                "batch_tiles",
                format!("mixed tile sizes {size} and {}", t.size()),
            ));
        }
    }
    let mut out = ndarray::Array4::zeros((tiles.len(), 3, size, size));
    for (i, t) in tiles.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&t.to_chw_f64());
    }
    Ok(out)
}

/// Stacks aligned masks into an `(N, 2, H, W)` one-hot batch.
pub fn batch_masks(masks: &[&Mask]) -> Result<ndarray::Array4<f64>> {
    if masks.is_empty() {
        return Err(IcssnError::invalid("batch_masks", "empty batch"));
    }
    let shape = masks[0].shape();
    for m in masks {
        if m.shape() != shape {
            return Err(IcssnError::shape("batch_masks", "mixed mask sizes".to_string()));
        }
    }
    let mut out = ndarray::Array4::zeros((masks.len(), 2, shape.0, shape.1));
    for (i, m) in masks.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&m.to_one_hot());
    }
    Ok(out)
}

/// A binary segmentation mask aligned with a [`Tile`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    /// Labels in `{0, 1}`, shape `(H, W)`.
    pub labels: Array2<u8>,
}

impl Mask {
    /// Wraps label data, enforcing strictly binary values.
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&v| v > 1) {
            return Err(IcssnError::invalid(
                "Mask::new",
                format!("mask values must be 0 or 1, found {bad}"),
            ));
        }
        Ok(Mask { labels })
    }

    /// An all-background mask of the given square size.
    pub fn zeros(size: usize) -> Self {
        Mask {
            labels: Array2::zeros((size, size)),
        }
    }

    /// `(H, W)`.
    pub fn shape(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Number of landslide (class-1) pixels.
    pub fn positive_count(&self) -> u64 {
        self.labels.iter().map(|&v| u64::from(v)).sum()
    }

    /// Number of pixels labelled 1 in both masks.
    ///
    /// Errors if the masks are not the same shape.
    pub fn intersection_count(&self, other: &Mask) -> Result<u64> {
        if self.shape() != other.shape() {
            return Err(IcssnError::shape(
                "Mask::intersection_count",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self
            .labels
            .iter()
            .zip(other.labels.iter())
            .filter(|&(&a, &b)| a == 1 && b == 1)
            .count() as u64)
    }

    /// Expands to a two-channel one-hot float array `(2, H, W)`:
    /// channel 0 = slope, channel 1 = landslide.
    pub fn to_one_hot(&self) -> Array3<f64> {
        let (h, w) = self.shape();
        let mut out = Array3::zeros((2, h, w));
        for y in 0..h {
            for x in 0..w {
                out[[usize::from(self.labels[[y, x]]), y, x]] = 1.0;
            }
        }
        out
    }
}

/// Object-level class of a whole sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    /// The tile contains at least one landslide pixel.
    Landslide,
    /// The tile is pure slope/background.
    Slope,
}

impl ObjectClass {
    /// The label a mask implies: landslide iff any class-1 pixel exists.
    pub fn from_mask(mask: &Mask) -> Self {
        if mask.positive_count() > 0 {
            ObjectClass::Landslide
        } else {
            ObjectClass::Slope
        }
    }
}

impl std::fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ObjectClass::Landslide => write!(f, "landslide"),
            ObjectClass::Slope => write!(f, "slope"),
        }
    }
}

/// One dataset element: tile, mask, derived object label, stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tile: Tile,
    pub mask: Mask,
    pub object_label: ObjectClass,
    pub id: String,
}

impl Sample {
    /// Builds a sample, deriving `object_label` from the mask so the
    /// label/mask invariant holds by construction.
    pub fn new(id: impl Into<String>, tile: Tile, mask: Mask) -> Result<Self> {
        let (h, w) = mask.shape();
        if (h, w) != (tile.size(), tile.size()) {
            return Err(IcssnError::shape(
                "Sample::new",
                format!("mask {h}×{w} does not match tile {0}×{0}", tile.size()),
            ));
        }
        Ok(Sample {
            object_label: ObjectClass::from_mask(&mask),
            tile,
            mask,
            id: id.into(),
        })
    }
}

/// Per-split sample counts by object class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub landslide: usize,
    pub slope: usize,
}

impl ClassCounts {
    /// Total samples in the split.
    pub fn total(&self) -> usize {
        self.landslide + self.slope
    }
}

/// Split assignment for a dataset: which sample ids belong to which split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Seed the split (and, for synthetic data, the generator) used.
    pub seed: u64,
    pub train_counts: ClassCounts,
    pub val_counts: ClassCounts,
    pub test_counts: ClassCounts,
}

impl DatasetManifest {
    /// All ids across the three splits, in split order.
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }
}

/// Runs the preprocessing pipeline over a split dataset: every tile is
/// histogram-equalised, and each train/val sample is expanded into the
/// identity plus five geometric transforms (`_hflip`, `_vflip`, `_rot90`,
/// `_rot180`, `_rot270` id suffixes).  Test samples are equalised only.
pub fn preprocess_dataset(ds: &LoadedDataset) -> Result<(Vec<Sample>, DatasetManifest)> {
    let mut samples = Vec::new();
    let mut manifest = DatasetManifest {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed: ds.manifest.seed,
        train_counts: ClassCounts::default(),
        val_counts: ClassCounts::default(),
        test_counts: ClassCounts::default(),
    };

    let mut process_split = |ids: &[String], augment: bool, list: &mut Vec<String>, counts: &mut ClassCounts| -> Result<()> {
        for id in ids {
            let sample = ds.get(id).ok_or_else(|| {
                IcssnError::invalid("preprocess_dataset", format!("id `{id}` missing from dataset"))
            })?;
            let equalized = Sample {
                tile: equalize_histogram(&sample.tile),
                ..sample.clone()
            };
            let ops: &[AugmentOp] = if augment {
                &standard_augmentations()
            } else {
                &[AugmentOp::Identity]
            };
            for &op in ops {
                let mut copy = augment_sample(&equalized, op);
                if op != AugmentOp::Identity {
                    copy.id = format!("{}_{}", copy.id, op.name());
                }
                match copy.object_label {
                    ObjectClass::Landslide => counts.landslide += 1,
                    ObjectClass::Slope => counts.slope += 1,
                }
                list.push(copy.id.clone());
                samples.push(copy);
            }
        }
        Ok(())
    };

    process_split(&ds.manifest.train, true, &mut manifest.train, &mut manifest.train_counts)?;
    process_split(&ds.manifest.val, true, &mut manifest.val, &mut manifest.val_counts)?;
    process_split(&ds.manifest.test, false, &mut manifest.test, &mut manifest.test_counts)?;
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn dummy(id: &str, landslide: bool) -> Sample {
        let mut labels = Array2::zeros((8, 8));
        if landslide {
            labels[[2, 2]] = 1;
        }
        Sample::new(
            id,
            Tile::new(Array3::from_elem((8, 8, 3), 70), DEFAULT_RESOLUTION_M).unwrap(),
            Mask::new(labels).unwrap(),
        )
        .unwrap()
    }

    /// 300 landslide + 100 slope originals, split 6:2:2 and expanded ×6 on
    /// train/val, reproduce the reference partition shape exactly:
    /// 1080/360/60 landslide and 360/120/20 slope.
    #[test]
    fn paper_scale_split_and_augmentation_shape() {
        let mut originals = Vec::new();
        for i in 0..300 {
            originals.push(dummy(&format!("slide_{i:04}"), true));
        }
        for i in 0..100 {
            originals.push(dummy(&format!("slope_{i:04}"), false));
        }
        let manifest = split_dataset(&originals, SplitRatios::default(), 1).unwrap();
        assert_eq!(manifest.train_counts, ClassCounts { landslide: 180, slope: 60 });
        assert_eq!(manifest.val_counts, ClassCounts { landslide: 60, slope: 20 });
        assert_eq!(manifest.test_counts, ClassCounts { landslide: 60, slope: 20 });

        let ds = LoadedDataset::from_parts(manifest, originals).unwrap();
        let (samples, processed) = preprocess_dataset(&ds).unwrap();
        assert_eq!(processed.train_counts, ClassCounts { landslide: 1080, slope: 360 });
        assert_eq!(processed.val_counts, ClassCounts { landslide: 360, slope: 120 });
        assert_eq!(processed.test_counts, ClassCounts { landslide: 60, slope: 20 });
        assert_eq!(samples.len(), 1440 + 480 + 80);

        // Augmented ids are disjoint and well-formed.
        let ids: std::collections::BTreeSet<&String> = processed.all_ids().collect();
        assert_eq!(ids.len(), samples.len());
    }

    #[test]
    fn one_hot_expansion_is_exact() {
        let s = dummy("x", true);
        let hot = s.mask.to_one_hot();
        assert_eq!(hot[[1, 2, 2]], 1.0);
        assert_eq!(hot[[0, 2, 2]], 0.0);
        assert_eq!(hot[[0, 0, 0]], 1.0);
        let total: f64 = hot.sum();
        assert_eq!(total, 64.0);
    }

    #[test]
    fn tile_chw_conversion_scales_to_unit_range() {
        let mut pixels = Array3::zeros((4, 4, 3));
        pixels[[1, 2, 0]] = 255;
        pixels[[3, 0, 2]] = 51;
        let tile = Tile::new(pixels, DEFAULT_RESOLUTION_M).unwrap();
        let chw = tile.to_chw_f64();
        assert_eq!(chw[[0, 1, 2]], 1.0);
        assert!((chw[[2, 3, 0]] - 0.2).abs() < 1e-12);
        assert_eq!(chw[[1, 0, 0]], 0.0);
    }
}

//! On-disk dataset layout: `images/<id>.png`, `masks/<id>.png`,
//! `manifest.json`.
//!
//! Masks are single-channel PNGs whose pixels are literally 0 or 1.

use super::{DatasetManifest, Mask, Sample, Tile, DEFAULT_RESOLUTION_M};
use crate::error::{IcssnError, Result};
use image::{GrayImage, RgbImage};
use indexmap::IndexMap;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

/// Which split to pull from a [`LoadedDataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A dataset read back from disk: manifest plus all samples, addressable by id.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    samples: IndexMap<String, Sample>,
}

impl LoadedDataset {
    /// Builds the in-memory form from parts, verifying that the manifest ids
    /// and the sample ids coincide exactly.
    pub fn from_parts(manifest: DatasetManifest, samples: Vec<Sample>) -> Result<Self> {
        let manifest_ids: BTreeSet<&String> = manifest.all_ids().collect();
        let sample_ids: BTreeSet<&String> = samples.iter().map(|s| &s.id).collect();
        if manifest_ids != sample_ids {
            return Err(IcssnError::invalid(
                "LoadedDataset::from_parts",
                format!(
                    "manifest lists {} ids but {} samples were provided (sets differ)",
                    manifest_ids.len(),
                    sample_ids.len()
                ),
            ));
        }
        let mut map = IndexMap::with_capacity(samples.len());
        for s in samples {
            if map.insert(s.id.clone(), s).is_some() {
                return Err(IcssnError::invalid(
                    "LoadedDataset::from_parts",
                    "duplicate sample id",
                ));
            }
        }
        Ok(LoadedDataset {
            manifest,
            samples: map,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.get(id)
    }

    /// All samples in insertion order.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples.values()
    }

    /// The samples of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        let ids = match split {
            Split::Train => &self.manifest.train,
            Split::Val => &self.manifest.val,
            Split::Test => &self.manifest.test,
        };
        ids.iter()
            .map(|id| {
                self.samples
                    .get(id)
                    .expect("from_parts verified manifest/sample id agreement")
            })
            .collect()
    }

    /// Consumes the dataset, returning manifest and samples.
    pub fn into_parts(self) -> (DatasetManifest, Vec<Sample>) {
        (self.manifest, self.samples.into_values().collect())
    }
}

fn tile_to_png(tile: &Tile) -> RgbImage {
    let (h, w, _) = tile.pixels.dim();
    let raw = tile
        .pixels
        .as_standard_layout()
        .iter()
        .copied()
        .collect::<Vec<u8>>();
    RgbImage::from_raw(w as u32, h as u32, raw).expect("tile buffer matches dimensions")
}

fn mask_to_png(mask: &Mask) -> GrayImage {
    let (h, w) = mask.shape();
    let raw = mask
        .labels
        .as_standard_layout()
        .iter()
        .copied()
        .collect::<Vec<u8>>();
    GrayImage::from_raw(w as u32, h as u32, raw).expect("mask buffer matches dimensions")
}

/// Writes `images/`, `masks/`, and `manifest.json` under `dir`.
///
/// The manifest must reference exactly the provided samples.
pub fn save_dataset(dir: &Path, samples: &[Sample], manifest: &DatasetManifest) -> Result<()> {
    let manifest_ids: BTreeSet<&String> = manifest.all_ids().collect();
    let sample_ids: BTreeSet<&String> = samples.iter().map(|s| &s.id).collect();
    if manifest_ids != sample_ids {
        return Err(IcssnError::invalid(
            "save_dataset",
            "manifest ids and sample ids differ",
        ));
    }

    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    for s in samples {
        tile_to_png(&s.tile).save(images.join(format!("{}.png", s.id)))?;
        mask_to_png(&s.mask).save(masks.join(format!("{}.png", s.id)))?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
///
/// Mask PNGs must be strictly binary; anything else is rejected.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut samples = Vec::new();
    for id in manifest.all_ids() {
        let img_path = dir.join("images").join(format!("{id}.png"));
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let rgb = image::open(&img_path)?.into_rgb8();
        let gray = image::open(&mask_path)?.into_luma8();
        let (w, h) = rgb.dimensions();
        let pixels = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
            .expect("decoded buffer matches dimensions");
        let (mw, mh) = gray.dimensions();
        let labels = Array2::from_shape_vec((mh as usize, mw as usize), gray.into_raw())
            .expect("decoded buffer matches dimensions");
        let tile = Tile::new(pixels, DEFAULT_RESOLUTION_M)?;
        let mask = Mask::new(labels).map_err(|_| IcssnError::Checkpoint {
            path: mask_path.display().to_string(),
            details: "mask PNG contains non-binary values".into(),
        })?;
        samples.push(Sample::new(id.clone(), tile, mask)?);
    }
    LoadedDataset::from_parts(manifest, samples)
}

//! Sub-object-level labels and contrastive pair sampling.
//!
//! The mask is divided into blocks (8×8 at full scale, matching the 1/8
//! feature stride), and each block is labelled by its class-1 pixel count:
//! fewer than `lo` → negative (slope), between `lo` and `hi` inclusive →
//! positive (landslide boundary region), more than `hi` → irrelevant
//! (landslide interior — excluded from contrast in the edge strategy and
//! never used as a negative).

use super::SegLossConfig;
use crate::data::Mask;
use crate::seed::rng_for;
use crate::{IcssnError, Result};
use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;

/// Default block edge in mask pixels (one feature cell at stride 8).
pub const DEFAULT_BLOCK: usize = 8;
/// Default lower bound of the positive band (inclusive).
pub const DEFAULT_LO: usize = 7;
/// Default upper bound of the positive band (inclusive).
pub const DEFAULT_HI: usize = 57;

/// Sub-object class of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockLabel {
    /// Landslide boundary region: `lo ≤ count ≤ hi`.
    Positive,
    /// Slope block: `count < lo`.
    Negative,
    /// Landslide interior: `count > hi`.
    Irrelevant,
}

/// Per-block labels, `(H/block, W/block)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoclGrid {
    pub labels: Array2<BlockLabel>,
}

impl SoclGrid {
    pub fn shape(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Row-major coordinates of every block with the given label.
    pub fn coords_of(&self, label: BlockLabel) -> Vec<(usize, usize)> {
        let (h, w) = self.labels.dim();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.labels[[y, x]] == label {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Labels each `block`×`block` mask cell by its class-1 pixel count:
/// `< lo` → negative, `lo..=hi` → positive, `> hi` → irrelevant.
pub fn derive_socl_labels(mask: &Mask, block: usize, lo: usize, hi: usize) -> Result<SoclGrid> {
    if block == 0 {
        return Err(IcssnError::invalid("derive_socl_labels", "block size 0"));
    }
    if lo > hi || hi > block * block {
        return Err(IcssnError::invalid(
            "derive_socl_labels",
            format!("thresholds lo={lo}, hi={hi} out of order for block {block}"),
        ));
    }
    let (h, w) = mask.shape();
    if h % block != 0 || w % block != 0 {
        return Err(IcssnError::shape(
            "derive_socl_labels",
            format!("mask {h}x{w} not divisible by block {block}"),
        ));
    }
    let labels = Array2::from_shape_fn((h / block, w / block), |(by, bx)| {
        let mut count = 0usize;
        for y in by * block..(by + 1) * block {
            for x in bx * block..(bx + 1) * block {
                count += usize::from(mask.labels[[y, x]]);
            }
        }
        if count < lo {
            BlockLabel::Negative
        } else if count <= hi {
            BlockLabel::Positive
        } else {
            BlockLabel::Irrelevant
        }
    });
    Ok(SoclGrid { labels })
}

/// A block's unit-normalized feature vector with its grid coordinates.
/// `norm` is the pre-normalization magnitude, kept for backpropagation
/// through the normalization.
#[derive(Debug, Clone)]
pub struct SoclVector {
    pub y: usize,
    pub x: usize,
    pub v: Array1<f64>,
    pub norm: f64,
}

/// The sampled contrast sets.  Every positive serves as an anchor against
/// the remaining positives and all negatives.  `empty` is set when the grid
/// offered no positive candidates at all.
#[derive(Debug, Clone)]
pub struct SoclPairBatch {
    pub positives: Vec<SoclVector>,
    pub negatives: Vec<SoclVector>,
    pub tau: f64,
    pub empty: bool,
}

/// Which blocks may act as positives (negatives always come from N blocks;
/// irrelevant blocks are never negatives).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Boundary blocks (P) are the positives.
    Edge,
    /// Interior blocks (I) substitute as the positives.
    Center,
    /// P ∪ I pooled with equal per-block probability.
    Hybrid,
}

fn unit_vector_at(feat: &ArrayView3<f64>, y: usize, x: usize) -> Option<SoclVector> {
    let c = feat.dim().0;
    let mut v = Array1::zeros(c);
    for ch in 0..c {
        v[ch] = feat[[ch, y, x]];
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None; // a zero vector has no direction to contrast
    }
    Some(SoclVector {
        y,
        x,
        v: v / norm,
        norm,
    })
}

/// Samples up to `n_pos` positive and `n_neg` negative block vectors
/// without replacement, unit-normalizing each feature column.  `feat` is a
/// `(C, H/8, W/8)` view spatially aligned with the grid.  Deterministic
/// given `seed`.
pub fn select_socl_pairs_chw(
    feat: &ArrayView3<f64>,
    grid: &SoclGrid,
    cfg: &SegLossConfig,
    seed: u64,
) -> Result<SoclPairBatch> {
    let (_, fh, fw) = feat.dim();
    if (fh, fw) != grid.shape() {
        return Err(IcssnError::shape(
            "select_socl_pairs",
            format!("features {fh}x{fw} vs grid {:?}", grid.shape()),
        ));
    }

    let mut pos_pool = match cfg.strategy {
        SamplingStrategy::Edge => grid.coords_of(BlockLabel::Positive),
        SamplingStrategy::Center => grid.coords_of(BlockLabel::Irrelevant),
        SamplingStrategy::Hybrid => {
            let mut pool = grid.coords_of(BlockLabel::Positive);
            pool.extend(grid.coords_of(BlockLabel::Irrelevant));
            pool
        }
    };
    let mut neg_pool = grid.coords_of(BlockLabel::Negative);

    let mut pos_rng = rng_for(seed, "socl/select", &[0]);
    let mut neg_rng = rng_for(seed, "socl/select", &[1]);
    pos_pool.shuffle(&mut pos_rng);
    neg_pool.shuffle(&mut neg_rng);

    let positives: Vec<SoclVector> = pos_pool
        .into_iter()
        .filter_map(|(y, x)| unit_vector_at(feat, y, x))
        .take(cfg.n_pos)
        .collect();
    let negatives: Vec<SoclVector> = neg_pool
        .into_iter()
        .filter_map(|(y, x)| unit_vector_at(feat, y, x))
        .take(cfg.n_neg)
        .collect();

    let empty = positives.is_empty();
    Ok(SoclPairBatch {
        positives,
        negatives,
        tau: cfg.tau,
        empty,
    })
}

/// [`select_socl_pairs_chw`] over a `(H/8, W/8, C)` feature map.
pub fn select_socl_pairs(
    f: &crate::encoder::FeatureMap,
    grid: &SoclGrid,
    cfg: &SegLossConfig,
    seed: u64,
) -> Result<SoclPairBatch> {
    let chw: Array3<f64> = f.values.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
    select_socl_pairs_chw(&chw.view(), grid, cfg, seed)
}

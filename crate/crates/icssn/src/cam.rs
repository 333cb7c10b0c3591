//! Grad-CAM heatmaps over the encoder's final feature map, for both the
//! pair classifier and the segmenter.
//!
//! The recipe is the classic one: pick a scalar target score, take its
//! gradient at the encoder output, average the gradient spatially to get one
//! weight per channel, and ReLU the weighted channel sum.  The coarse map is
//! then upsampled to tile resolution and min-max normalized.  Both branches
//! attribute against the same feature map — the shared encoder's output —
//! so their heatmaps are directly comparable.

use crate::classifier::{Classifier, HeadKind, JointLabel};
use crate::data::{batch_tiles, Mask, ObjectClass, Tile};
use crate::encoder::Encoder;
use crate::nn::{bilinear_resize, Mode, Params};
use crate::segmenter::Segmenter;
use crate::seed::rng_for;
use crate::{IcssnError, Result};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array4};
use std::path::Path;

/// A normalized attribution map aligned with its input tile.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// Heat in `[0, 1]`, shape `(H, W)` equal to the tile.
    pub values: Array2<f64>,
    /// What the map attributes: a joint class name or `"landslide"`.
    pub target: String,
    /// True when the raw map was constant (typically a zero gradient);
    /// `values` is then all zeros rather than an arbitrary rescaling.
    pub flat: bool,
}

impl Heatmap {
    /// Upsamples a feature-resolution map to `(out_h, out_w)` and min-max
    /// normalizes it.  Constant maps (no contrast to rescale) come back as
    /// all zeros with the `flat` flag set.
    fn build(raw: &Array2<f64>, out_h: usize, out_w: usize, target: String) -> Heatmap {
        let up = bilinear_resize(raw, out_h, out_w);
        let min = up.iter().copied().fold(f64::INFINITY, f64::min);
        let max = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            Heatmap {
                values: up.mapv(|v| (v - min) / (max - min)),
                target,
                flat: false,
            }
        } else {
            Heatmap {
                values: Array2::zeros((out_h, out_w)),
                target,
                flat: true,
            }
        }
    }

    /// `(H, W)` of the map.
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Channel weights (the spatial gradient means) followed by the ReLU'd
/// weighted channel sum, at feature resolution.  Both arrays are `(1, C, h, w)`.
fn weighted_activation(feats: &Array4<f64>, grads: &Array4<f64>) -> Array2<f64> {
    let (_, c, h, w) = feats.dim();
    let area = (h * w) as f64;
    let mut raw = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let alpha = grads.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), ch).sum() / area;
        for y in 0..h {
            for x in 0..w {
                raw[[y, x]] += alpha * feats[[0, ch, y, x]];
            }
        }
    }
    raw.mapv_inplace(|v| v.max(0.0));
    raw
}

/// The target-score gradient at the head logits for a joint class: the
/// plain one-hot for the 4-way head, or the two slot one-hots for the
/// dual-binary head (whose joint score is the sum of its slot logits).
fn classification_target_gradient(head: HeadKind, target: JointLabel) -> Array2<f64> {
    let mut d = Array2::zeros((1, 4));
    match head {
        HeadKind::Joint4 => d[[0, target.index()]] = 1.0,
        HeadKind::DualBinary => {
            let (a, b) = target.slots();
            d[[0, usize::from(a != ObjectClass::Landslide)]] = 1.0;
            d[[0, 2 + usize::from(b != ObjectClass::Landslide)]] = 1.0;
        }
    }
    d
}

/// Grad-CAM for the pair classifier on an explicit `(a, b)` pair.  The
/// heatmap attributes the target joint-class score to slot `a`'s feature
/// map.  Runs in eval mode; only gradient buffers in `params` are touched.
pub fn grad_cam_classification_pair(
    encoder: &Encoder,
    classifier: &Classifier,
    params: &mut Params,
    a: &Tile,
    b: &Tile,
    target: JointLabel,
) -> Result<Heatmap> {
    let xa = batch_tiles(&[a])?;
    let xb = batch_tiles(&[b])?;
    let (_, cache) = classifier.forward_batch(encoder, params, &xa, &xb, Mode::Eval)?;
    let dlogits = classification_target_gradient(classifier.config.head, target);
    params.zero_grads();
    let (gfa, _) = classifier.feature_gradients(params, &cache, &dlogits)?;
    params.zero_grads();
    let (fa, _) = cache.features();
    let raw = weighted_activation(fa, &gfa);
    Ok(Heatmap::build(
        &raw,
        a.size(),
        a.size(),
        format!("{target:?}"),
    ))
}

/// Grad-CAM for the pair classifier on a single tile: the tile fills both
/// siamese slots, so the map shows what the encoder-plus-head attends to in
/// the image itself.
pub fn grad_cam_classification(
    encoder: &Encoder,
    classifier: &Classifier,
    params: &mut Params,
    tile: &Tile,
    target: JointLabel,
) -> Result<Heatmap> {
    grad_cam_classification_pair(encoder, classifier, params, tile, tile, target)
}

/// Grad-CAM for the segmenter.  The target score is the sum of class-1
/// (landslide) logits over the ground-truth landslide pixels of `mask`; a
/// mask without landslide pixels has a zero gradient everywhere and yields
/// a flagged all-zero map.  Runs in eval mode; only gradient buffers in
/// `params` are touched.
pub fn grad_cam_segmentation(
    encoder: &Encoder,
    segmenter: &Segmenter,
    params: &mut Params,
    tile: &Tile,
    mask: &Mask,
) -> Result<Heatmap> {
    if mask.shape() != (tile.size(), tile.size()) {
        return Err(IcssnError::shape(
            "grad_cam_segmentation",
            format!(
                "mask {:?} does not match the {size}×{size} tile",
                mask.shape(),
                size = tile.size(),
            ),
        ));
    }
    let x = batch_tiles(&[tile])?;
    let mut rng = rng_for(0, "cam/eval", &[]);
    let (logits, cache) = segmenter.forward(encoder, params, &x, Mode::Eval, &mut rng)?;
    let mut dlogits = Array4::zeros(logits.dim());
    for ((y, x), &v) in mask.labels.indexed_iter() {
        if v == 1 {
            dlogits[[0, 1, y, x]] = 1.0;
        }
    }
    params.zero_grads();
    let dfeats = segmenter.feature_gradient(params, &cache, &dlogits);
    params.zero_grads();
    let raw = weighted_activation(&cache.feats, &dfeats);
    Ok(Heatmap::build(
        &raw,
        tile.size(),
        tile.size(),
        "landslide".into(),
    ))
}

/// Mean heat in a boundary band versus blob interiors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandStats {
    /// Mean heat over pixels within `band_px` of a landslide boundary.
    pub band_mean: f64,
    /// Mean heat over landslide pixels outside the band.
    pub interior_mean: f64,
}

/// Splits `values` along the mask's landslide boundary: the band is every
/// pixel within Chebyshev distance `band_px` of a boundary pixel (a
/// landslide pixel with a non-landslide 4-neighbour), and the interior is
/// the remaining landslide area.  Returns `None` when either region is
/// empty — an all-background or blob-free mask has no boundary to measure.
pub fn boundary_band_stats(
    values: &Array2<f64>,
    mask: &Mask,
    band_px: usize,
) -> Option<BandStats> {
    let (h, w) = mask.shape();
    if values.dim() != (h, w) {
        return None;
    }
    // Seed the band with boundary pixels, then dilate band_px times.
    let mut band = Array2::<bool>::default((h, w));
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask.labels[[y, x]] != 1 {
                continue;
            }
            let edge = (y == 0 || mask.labels[[y - 1, x]] == 0)
                || (y + 1 == h || mask.labels[[y + 1, x]] == 0)
                || (x == 0 || mask.labels[[y, x - 1]] == 0)
                || (x + 1 == w || mask.labels[[y, x + 1]] == 0);
            if edge {
                band[[y, x]] = true;
                any = true;
            }
        }
    }
    if !any {
        return None;
    }
    for _ in 0..band_px {
        let prev = band.clone();
        for y in 0..h {
            for x in 0..w {
                if prev[[y, x]] {
                    continue;
                }
                let y0 = y.saturating_sub(1);
                let x0 = x.saturating_sub(1);
                'probe: for yy in y0..=(y + 1).min(h - 1) {
                    for xx in x0..=(x + 1).min(w - 1) {
                        if prev[[yy, xx]] {
                            band[[y, x]] = true;
                            break 'probe;
                        }
                    }
                }
            }
        }
    }

    let mut band_sum = 0.0;
    let mut band_n = 0usize;
    let mut int_sum = 0.0;
    let mut int_n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if band[[y, x]] {
                band_sum += values[[y, x]];
                band_n += 1;
            } else if mask.labels[[y, x]] == 1 {
                int_sum += values[[y, x]];
                int_n += 1;
            }
        }
    }
    if band_n == 0 || int_n == 0 {
        return None;
    }
    Some(BandStats {
        band_mean: band_sum / band_n as f64,
        interior_mean: int_sum / int_n as f64,
    })
}

/// The classic four-segment "jet" ramp, `v ∈ [0, 1]` → RGB.
fn jet(v: f64) -> [u8; 3] {
    let ch = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    [
        ch(1.5 - (4.0 * v - 3.0).abs()),
        ch(1.5 - (4.0 * v - 2.0).abs()),
        ch(1.5 - (4.0 * v - 1.0).abs()),
    ]
}

/// Renders the heatmap alone as an 8-bit grayscale image.
pub fn heatmap_image(heat: &Heatmap) -> GrayImage {
    let (h, w) = heat.shape();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in heat.values.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
    }
    img
}

/// Alpha-blends the jet-colored heatmap over the tile.
pub fn overlay_image(tile: &Tile, heat: &Heatmap, alpha: f64) -> Result<RgbImage> {
    let size = tile.size();
    if heat.shape() != (size, size) {
        return Err(IcssnError::shape(
            "overlay_image",
            format!("heatmap {:?} does not match the {size}×{size} tile", heat.shape()),
        ));
    }
    let a = alpha.clamp(0.0, 1.0);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let color = jet(heat.values[[y, x]]);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let base = f64::from(tile.pixels[[y, x, c]]);
                px[c] = ((1.0 - a) * base + a * f64::from(color[c])).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Writes the raw heatmap next to its overlay: `<stem>.png` gets the
/// alpha-blended overlay and `<stem>_heat.png` the grayscale map.
pub fn write_cam_pngs(tile: &Tile, heat: &Heatmap, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    overlay_image(tile, heat, 0.5)?.save(out)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("cam");
    let heat_path = out.with_file_name(format!("{stem}_heat.png"));
    heatmap_image(heat).save(heat_path)?;
    Ok(())
}

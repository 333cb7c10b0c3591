//! Cutting large rasters into fixed-size tiles.
//!
//! The grid is non-overlapping; when the raster does not divide evenly the
//! bottom/right remainder is filled by symmetric (edge-inclusive) reflection.

use super::{Mask, Sample, Tile, DEFAULT_RESOLUTION_M};
use crate::error::{IcssnError, Result};
use ndarray::{s, Array2, Array3};

/// Maps index `i` into `[0, n)` by symmetric reflection: `n, n+1, …` read
/// back as `n-1, n-2, …`, folding repeatedly so any offset is valid.
fn fold_index(i: usize, n: usize) -> usize {
    let j = i % (2 * n);
    if j < n {
        j
    } else {
        2 * n - 1 - j
    }
}

/// Pads an `H×W×C` image on the bottom and right to `target_h × target_w`
/// by symmetric reflection.
pub fn reflect_pad(image: &Array3<u8>, target_h: usize, target_w: usize) -> Result<Array3<u8>> {
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 {
        return Err(IcssnError::invalid("reflect_pad", "empty image"));
    }
    if target_h < h || target_w < w {
        return Err(IcssnError::invalid(
            "reflect_pad",
            format!("target {target_h}×{target_w} smaller than input {h}×{w}"),
        ));
    }
    let mut out = Array3::zeros((target_h, target_w, c));
    for y in 0..target_h {
        let sy = fold_index(y, h);
        for x in 0..target_w {
            let sx = fold_index(x, w);
            for ch in 0..c {
                out[[y, x, ch]] = image[[sy, sx, ch]];
            }
        }
    }
    Ok(out)
}

/// Single-channel variant of [`reflect_pad`] for label rasters.
pub(crate) fn reflect_pad_mask(
    mask: &Array2<u8>,
    target_h: usize,
    target_w: usize,
) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    if h == 0 || w == 0 {
        return Err(IcssnError::invalid("reflect_pad", "empty mask"));
    }
    if target_h < h || target_w < w {
        return Err(IcssnError::invalid(
            "reflect_pad",
            format!("target {target_h}×{target_w} smaller than input {h}×{w}"),
        ));
    }
    let mut out = Array2::zeros((target_h, target_w));
    for y in 0..target_h {
        let sy = fold_index(y, h);
        for x in 0..target_w {
            out[[y, x]] = mask[[sy, fold_index(x, w)]];
        }
    }
    Ok(out)
}

/// Cuts an RGB raster and its aligned label raster into a non-overlapping
/// grid of `tile_size`-sized [`Sample`]s, reflection-padding the remainder.
///
/// Sample ids are `tile_r{row}_c{col}` in row-major grid order.
pub fn tile_raster(
    raster: &Array3<u8>,
    mask_raster: &Array2<u8>,
    tile_size: usize,
) -> Result<Vec<Sample>> {
    let (h, w, c) = raster.dim();
    if mask_raster.dim() != (h, w) {
        return Err(IcssnError::shape(
            "tile_raster",
            format!(
                "raster {h}×{w} vs mask {:?} misaligned",
                mask_raster.dim()
            ),
        ));
    }
    if c != 3 {
        return Err(IcssnError::shape(
            "tile_raster",
            format!("raster must be RGB, got {c} channels"),
        ));
    }
    if tile_size == 0 {
        return Err(IcssnError::invalid("tile_raster", "tile_size must be positive"));
    }
    let rows = h.div_ceil(tile_size);
    let cols = w.div_ceil(tile_size);
    let padded = reflect_pad(raster, rows * tile_size, cols * tile_size)?;
    let padded_mask = reflect_pad_mask(mask_raster, rows * tile_size, cols * tile_size)?;

    let mut samples = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let y0 = r * tile_size;
            let x0 = col * tile_size;
            let pixels = padded
                .slice(s![y0..y0 + tile_size, x0..x0 + tile_size, ..])
                .to_owned();
            let labels = padded_mask
                .slice(s![y0..y0 + tile_size, x0..x0 + tile_size])
                .to_owned();
            samples.push(Sample::new(
                format!("tile_r{r}_c{col}"),
                Tile::new(pixels, DEFAULT_RESOLUTION_M)?,
                Mask::new(labels)?,
            )?);
        }
    }
    Ok(samples)
}

//! Per-channel histogram equalisation.

use super::Tile;

/// Equalises each colour channel independently with the classic CDF remap
/// `(cdf(v) − cdf_min) / (N − cdf_min) · 255`, rounded to the nearest level.
///
/// Constant channels are left unchanged (their histogram is degenerate), so
/// the operation never fails.
pub fn equalize_histogram(tile: &Tile) -> Tile {
    let (h, w, _) = tile.pixels.dim();
    let n = (h * w) as u64;
    let mut out = tile.pixels.clone();
    for ch in 0..3 {
        let mut hist = [0u64; 256];
        for y in 0..h {
            for x in 0..w {
                hist[usize::from(tile.pixels[[y, x, ch]])] += 1;
            }
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0;
        for (v, &count) in hist.iter().enumerate() {
            acc += count;
            cdf[v] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if cdf_min == n {
            // Single-level channel: the remap is 0/0, keep it as-is.
            continue;
        }
        let denom = (n - cdf_min) as f64;
        let mut lut = [0u8; 256];
        for v in 0..256 {
            if hist[v] > 0 {
                lut[v] = (((cdf[v] - cdf_min) as f64 / denom) * 255.0).round() as u8;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let px = &mut out[[y, x, ch]];
                *px = lut[usize::from(*px)];
            }
        }
    }
    Tile {
        pixels: out,
        resolution_m: tile.resolution_m,
    }
}

//! Synthetic surrogate dataset with landslide-like morphology.
//!
//! Backgrounds are layered value-noise textures; landslide regions are
//! ellipse or horseshoe blobs whose interior texture differs subtly from the
//! background and whose boundary carries a brighter rim, standing in for the
//! contrast a back/side wall produces in real imagery.  Everything is a pure
//! function of `(config, seed)`.

use super::{Mask, Sample, Tile};
use crate::error::{IcssnError, Result};
use crate::seed::rng_for;
use ndarray::Array2;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Intensity added to rim pixels per unit of `boundary_contrast`.
const RIM_GAIN: f64 = 35.0;
/// Mean intensity offset of blob interiors relative to the background.
const INTERIOR_SHIFT: f64 = -12.0;

/// Generation parameters for the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Side length of every generated tile.
    pub tile_size: usize,
    /// Number of landslide-class samples.
    pub landslide_count: usize,
    /// Number of pure-slope samples.
    pub slope_count: usize,
    /// Blobs per landslide tile, inclusive range.
    pub blob_count_range: (usize, usize),
    /// Blob outer radius as a fraction of `tile_size`, inclusive range.
    pub blob_radius_frac: (f64, f64),
    /// Rim brightness level; 0 disables the rim entirely.
    pub boundary_contrast: f64,
    /// Rim band width in pixels (Chebyshev distance from the boundary).
    pub rim_width: usize,
    /// Metadata carried onto every generated tile.
    pub resolution_m: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tile_size: 512,
            landslide_count: 300,
            slope_count: 100,
            blob_count_range: (1, 3),
            blob_radius_frac: (0.08, 0.22),
            boundary_contrast: 1.0,
            rim_width: 2,
            resolution_m: 2.0,
        }
    }
}

impl SynthConfig {
    /// Validates ranges; in particular a blob may never exceed the tile.
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 16 {
            return Err(IcssnError::Config(format!(
                "tile_size {} too small for blob synthesis (minimum 16)",
                self.tile_size
            )));
        }
        let (c_lo, c_hi) = self.blob_count_range;
        if c_lo < 1 || c_lo > c_hi {
            return Err(IcssnError::Config(format!(
                "blob_count_range ({c_lo}, {c_hi}) must satisfy 1 ≤ lo ≤ hi"
            )));
        }
        let (r_lo, r_hi) = self.blob_radius_frac;
        if !(r_lo > 0.0 && r_lo <= r_hi) {
            return Err(IcssnError::Config(format!(
                "blob_radius_frac ({r_lo}, {r_hi}) must satisfy 0 < lo ≤ hi"
            )));
        }
        if r_hi > 0.5 {
            return Err(IcssnError::Config(format!(
                "blob_radius_frac upper bound {r_hi} exceeds 0.5: blob diameter would exceed the tile"
            )));
        }
        if r_lo * (self.tile_size as f64) < 3.0 {
            return Err(IcssnError::Config(
                "minimum blob radius is below 3 pixels; blobs could rasterize empty".into(),
            ));
        }
        if self.boundary_contrast < 0.0 {
            return Err(IcssnError::Config("boundary_contrast must be ≥ 0".into()));
        }
        if self.rim_width == 0 {
            return Err(IcssnError::Config("rim_width must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Bilinear value noise in `[-1, 1]` on a lattice of `cell`-sized cells.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Array2<f64> {
    let cell = cell.max(1);
    let grid_n = size / cell + 2;
    let grid = Array2::from_shape_fn((grid_n, grid_n), |_| rng.random_range(-1.0..1.0));
    Array2::from_shape_fn((size, size), |(y, x)| {
        let gy = y / cell;
        let gx = x / cell;
        let fy = (y % cell) as f64 / cell as f64;
        let fx = (x % cell) as f64 / cell as f64;
        let top = grid[[gy, gx]] * (1.0 - fx) + grid[[gy, gx + 1]] * fx;
        let bot = grid[[gy + 1, gx]] * (1.0 - fx) + grid[[gy + 1, gx + 1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// One landslide region: a filled ellipse or an open horseshoe.
struct Blob {
    cy: f64,
    cx: f64,
    /// Outer radius along the major axis.
    r_out: f64,
    /// Minor/major axis ratio.
    aspect: f64,
    /// Orientation of the major axis.
    theta: f64,
    /// `Some((inner_frac, gap_dir, gap_half))` makes it a horseshoe: an
    /// annulus from `inner_frac·r_out` to `r_out` with an angular opening of
    /// half-width `gap_half` centred on `gap_dir`.
    opening: Option<(f64, f64, f64)>,
}

impl Blob {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        // Rotate into the blob frame and undo the aspect squash.
        let u = dx * self.theta.cos() + dy * self.theta.sin();
        let v = (-dx * self.theta.sin() + dy * self.theta.cos()) / self.aspect;
        let rho = (u * u + v * v).sqrt();
        if rho > self.r_out {
            return false;
        }
        match self.opening {
            None => true,
            Some((inner_frac, gap_dir, gap_half)) => {
                if rho < inner_frac * self.r_out {
                    return false;
                }
                let mut delta = (v.atan2(u) - gap_dir) % (2.0 * PI);
                if delta > PI {
                    delta -= 2.0 * PI;
                }
                if delta < -PI {
                    delta += 2.0 * PI;
                }
                delta.abs() > gap_half
            }
        }
    }
}

fn sample_blob(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Blob {
    let size = cfg.tile_size as f64;
    let (r_lo, r_hi) = cfg.blob_radius_frac;
    let r_out = rng.random_range(r_lo * size..=r_hi * size);
    let aspect = rng.random_range(0.55..0.95);
    let theta = rng.random_range(0.0..PI);
    let horseshoe = rng.random_bool(0.5);
    let opening = if horseshoe {
        let inner_frac = rng.random_range(0.45..0.62);
        let gap_dir = rng.random_range(0.0..2.0 * PI);
        // Opening of 85°–160° total, leaving a 200°–275° arc of material.
        let gap_half = rng.random_range(0.75..1.40);
        Some((inner_frac, gap_dir, gap_half))
    } else {
        None
    };
    let lo = r_out;
    let hi = size - 1.0 - r_out;
    let (cy, cx) = if hi <= lo {
        (size / 2.0, size / 2.0)
    } else {
        (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
    };
    Blob {
        cy,
        cx,
        r_out,
        aspect,
        theta,
        opening,
    }
}

/// Marks mask pixels within Chebyshev distance `width` of a background pixel.
fn rim_band(labels: &Array2<u8>, width: usize) -> Array2<bool> {
    let (h, w) = labels.dim();
    let w_i = width as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        if labels[[y, x]] == 0 {
            return false;
        }
        for dy in -w_i..=w_i {
            for dx in -w_i..=w_i {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                if labels[[ny as usize, nx as usize]] == 0 {
                    return true;
                }
            }
        }
        false
    })
}

/// Renders one tile. `with_blobs` controls whether a landslide is present.
fn render_sample(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    with_blobs: bool,
    id: String,
) -> Result<Sample> {
    let size = cfg.tile_size;

    // Background texture: shared coarse + fine fields under per-channel bases.
    let bases = [
        105.0 + rng.random_range(-15.0..15.0),
        100.0 + rng.random_range(-15.0..15.0),
        85.0 + rng.random_range(-15.0..15.0),
    ];
    let coarse = value_noise(rng, size, size / 6);
    let fine = value_noise(rng, size, (size / 24).max(2));

    // Blob geometry and mask.
    let mut labels = Array2::<u8>::zeros((size, size));
    if with_blobs {
        let (c_lo, c_hi) = cfg.blob_count_range;
        let count = rng.random_range(c_lo..=c_hi);
        let blobs: Vec<Blob> = (0..count).map(|_| sample_blob(rng, cfg)).collect();
        for y in 0..size {
            for x in 0..size {
                if blobs.iter().any(|b| b.contains(y, x)) {
                    labels[[y, x]] = 1;
                }
            }
        }
        if labels.iter().all(|&v| v == 0) {
            // Degenerate draw (never observed, kept for safety): stamp a
            // small central ellipse so the class label stays truthful.
            let fallback = Blob {
                cy: size as f64 / 2.0,
                cx: size as f64 / 2.0,
                r_out: (cfg.blob_radius_frac.0 * size as f64).max(3.0),
                aspect: 0.8,
                theta: 0.0,
                opening: None,
            };
            for y in 0..size {
                for x in 0..size {
                    if fallback.contains(y, x) {
                        labels[[y, x]] = 1;
                    }
                }
            }
        }
    }

    // Interior texture fields (drawn unconditionally so slope and landslide
    // tiles consume identical RNG streams for the same config).
    let interior_coarse = value_noise(rng, size, size / 10);
    let interior_fine = value_noise(rng, size, (size / 40).max(2));

    let rim = rim_band(&labels, cfg.rim_width);
    let rim_boost = cfg.boundary_contrast * RIM_GAIN;

    let mut pixels = Array3::<u8>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let (texture, shift) = if labels[[y, x]] == 1 {
                (
                    14.0 * interior_coarse[[y, x]] + 6.0 * interior_fine[[y, x]],
                    INTERIOR_SHIFT + if rim[[y, x]] { rim_boost } else { 0.0 },
                )
            } else {
                (18.0 * coarse[[y, x]] + 7.0 * fine[[y, x]], 0.0)
            };
            for c in 0..3 {
                let grain: f64 = rng.random_range(-3.0..3.0);
                let v = bases[c] + texture + shift + grain;
                pixels[[y, x, c]] = v.clamp(0.0, 255.0).round() as u8;
            }
        }
    }

    Sample::new(
        id,
        Tile::new(pixels, cfg.resolution_m)?,
        Mask::new(labels)?,
    )
}

/// Generates the full synthetic dataset: landslide samples first
/// (`slide_0000`, …), then slope samples (`slope_0000`, …).
///
/// Each sample derives its own RNG from `(seed, class, index)`, so changing
/// one count never perturbs other samples.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.landslide_count + cfg.slope_count);
    for i in 0..cfg.landslide_count {
        let mut rng = rng_for(seed, "synth/slide", &[i as u64]);
        out.push(render_sample(cfg, &mut rng, true, format!("slide_{i:04}"))?);
    }
    for i in 0..cfg.slope_count {
        let mut rng = rng_for(seed, "synth/slope", &[i as u64]);
        out.push(render_sample(cfg, &mut rng, false, format!("slope_{i:04}"))?);
    }
    Ok(out)
}

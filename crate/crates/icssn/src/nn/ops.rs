//! Stateless tensor ops: activations, pooling, dropout, channel concat,
//! spatial broadcast, softmax, and bilinear resizing.

use ndarray::{s, Array2, Array4, Axis, Dimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// ReLU. The cache is the pass-through mask.
pub fn relu<D: Dimension>(x: &ndarray::Array<f64, D>) -> (ndarray::Array<f64, D>, ndarray::Array<f64, D>) {
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (x * &mask, mask)
}

pub fn relu_backward<D: Dimension>(
    mask: &ndarray::Array<f64, D>,
    gy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    gy * mask
}

/// Elementwise logistic sigmoid. The cache is the output itself.
pub fn sigmoid<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward<D: Dimension>(
    y: &ndarray::Array<f64, D>,
    gy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    gy * &y.mapv(|s| s * (1.0 - s))
}

/// Inverted dropout mask: zero with probability `p`, else `1/(1−p)`.
#[derive(Debug)]
pub struct DropoutCache {
    mask: Option<Array4<f64>>,
}

/// Train mode samples a fresh mask from `rng`; eval mode is the identity.
pub fn dropout(
    x: &Array4<f64>,
    p: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> (Array4<f64>, DropoutCache) {
    assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0,1)");
    if !train || p == 0.0 {
        return (x.clone(), DropoutCache { mask: None });
    }
    let keep = 1.0 - p;
    let mask = Array4::from_shape_fn(x.dim(), |_| {
        if rng.random_bool(keep) {
            1.0 / keep
        } else {
            0.0
        }
    });
    (x * &mask, DropoutCache { mask: Some(mask) })
}

pub fn dropout_backward(cache: &DropoutCache, gy: &Array4<f64>) -> Array4<f64> {
    match &cache.mask {
        Some(mask) => gy * mask,
        None => gy.clone(),
    }
}

/// Fixed-window max pooling (used by the backbone stem: 3×3, stride 2, pad 1).
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Flat argmax (into the input's `(h, w)` plane) per output element.
#[derive(Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl MaxPool2d {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, MaxPoolCache) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_dims(h, w);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut argmax = vec![0usize; n * c * oh * ow];
        let mut flat_ix = 0;
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_pos = 0;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[i, ch, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_pos = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        y[[i, ch, oy, ox]] = best;
                        argmax[flat_ix] = best_pos;
                        flat_ix += 1;
                    }
                }
            }
        }
        (
            y,
            MaxPoolCache {
                argmax,
                in_dim: (n, c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(&self, cache: &MaxPoolCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.in_dim;
        let (oh, ow) = cache.out_hw;
        let mut dx = Array4::zeros((n, c, h, w));
        let mut flat_ix = 0;
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let pos = cache.argmax[flat_ix];
                        dx[[i, ch, pos / w, pos % w]] += gy[[i, ch, oy, ox]];
                        flat_ix += 1;
                    }
                }
            }
        }
        dx
    }
}

/// Global max pool `(N,C,H,W) → (N,C)`; cache holds flat argmax per (n,c).
pub fn global_max_pool(x: &Array4<f64>) -> (Array2<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let mut y = Array2::zeros((n, c));
    let mut argmax = vec![0usize; n * c];
    for i in 0..n {
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut pos = 0;
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[[i, ch, yy, xx]];
                    if v > best {
                        best = v;
                        pos = yy * w + xx;
                    }
                }
            }
            y[[i, ch]] = best;
            argmax[i * c + ch] = pos;
        }
    }
    (y, argmax)
}

pub fn global_max_pool_backward(
    argmax: &[usize],
    in_dim: (usize, usize, usize, usize),
    gy: &Array2<f64>,
) -> Array4<f64> {
    let (n, c, _, w) = in_dim;
    let mut dx = Array4::zeros(in_dim);
    for i in 0..n {
        for ch in 0..c {
            let pos = argmax[i * c + ch];
            dx[[i, ch, pos / w, pos % w]] += gy[[i, ch]];
        }
    }
    dx
}

/// Global average pool `(N,C,H,W) → (N,C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn global_avg_pool_backward(
    in_dim: (usize, usize, usize, usize),
    gy: &Array2<f64>,
) -> Array4<f64> {
    let (n, c, h, w) = in_dim;
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| gy[[i, ch]] * scale)
}

/// Channel concatenation `(N,C1,H,W) ⊕ (N,C2,H,W) → (N,C1+C2,H,W)`.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (n, c1, h, w) = a.dim();
    let (n2, c2, h2, w2) = b.dim();
    assert_eq!((n, h, w), (n2, h2, w2), "concat_channels spatial/batch dims");
    let mut y = Array4::zeros((n, c1 + c2, h, w));
    y.slice_mut(s![.., ..c1, .., ..]).assign(a);
    y.slice_mut(s![.., c1.., .., ..]).assign(b);
    y
}

/// Splits the concat gradient back into the two operands.
pub fn concat_channels_backward(gy: &Array4<f64>, c1: usize) -> (Array4<f64>, Array4<f64>) {
    (
        gy.slice(s![.., ..c1, .., ..]).to_owned(),
        gy.slice(s![.., c1.., .., ..]).to_owned(),
    )
}

/// Broadcasts per-channel scalars `(N,C)` over a spatial grid `(N,C,H,W)`.
pub fn broadcast_spatial(v: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = v.dim();
    Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| v[[i, ch]])
}

/// Adjoint of [`broadcast_spatial`]: sums over the spatial grid.
pub fn broadcast_spatial_backward(gy: &Array4<f64>) -> Array2<f64> {
    gy.sum_axis(Axis(3)).sum_axis(Axis(2))
}

/// Numerically stable row-wise softmax for `(N, K)` logits.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Bilinear resize of a single-channel map (no gradient path; used for
/// heatmap upsampling). Uses the half-pixel (align_corners = false) grid.
pub fn bilinear_resize(x: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        x[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + x[[y0, x1]] * (1.0 - dy) * dx
            + x[[y1, x0]] * dy * (1.0 - dx)
            + x[[y1, x1]] * dy * dx
    })
}

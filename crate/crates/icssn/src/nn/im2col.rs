//! im2col / col2im: the patch-matrix view that turns (dilated, strided)
//! convolution into one GEMM per sample.

use ndarray::{Array2, Array3};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let eff_k = dilation * (k - 1) + 1;
    (input + 2 * pad - eff_k) / stride + 1
}

/// Unfolds `x` (C×H×W) into a `(C·k·k) × (oh·ow)` matrix where column `o`
/// holds the receptive field of output position `o` (zero padding).
pub fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad, dilation);
    let ow = conv_out_size(w, k, stride, pad, dilation);
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a `(C·k·k) × (oh·ow)` matrix back onto a
/// C×H×W tensor, **accumulating** where receptive fields overlap.
pub fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array3<f64> {
    let oh = conv_out_size(h, k, stride, pad, dilation);
    let ow = conv_out_size(w, k, stride, pad, dilation);
    debug_assert_eq!(cols.dim(), (c * k * k, oh * ow));
    let mut x = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ch, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

//! Convolution and transposed convolution, im2col/GEMM based.

use super::im2col::{col2im, conv_out_size, im2col};
use super::{he_normal, Params};
use ndarray::{s, Array2, Array4, ArrayD, Ix4};
use rand_chacha::ChaCha8Rng;

/// 2-D convolution. Weight layout `(out_ch, in_ch, k, k)`; optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub bias: bool,
}

/// Forward cache: the input (columns are recomputed in backward, trading a
/// little compute for a much smaller activation footprint).
#[derive(Debug)]
pub struct Conv2dCache {
    x: Array4<f64>,
}

impl Conv2d {
    /// Plain 3×3/1×1-style conv without bias (the BN-follows case).
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            dilation: 1,
            bias: false,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    /// Registers weight (He-normal) and bias (zero) tensors.
    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let w = he_normal(
            rng,
            &[self.out_ch, self.in_ch, self.kernel, self.kernel],
            fan_in,
        );
        params.declare(&self.weight_name(), w, true);
        if self.bias {
            params.declare(
                &self.bias_name(),
                ArrayD::zeros(ndarray::IxDyn(&[self.out_ch])),
                true,
            );
        }
    }

    /// Output spatial dims for an input of `(h, w)`.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.kernel, self.stride, self.pad, self.dilation),
            conv_out_size(w, self.kernel, self.stride, self.pad, self.dilation),
        )
    }

    pub fn forward(&self, params: &Params, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "{}: input channels", self.name);
        let (oh, ow) = self.out_dims(h, w);
        let w_mat = params
            .get(&self.weight_name())
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .unwrap()
            .to_owned();
        let mut y = Array4::zeros((n, self.out_ch, oh, ow));
        for i in 0..n {
            let cols = im2col(
                &x.slice(s![i, .., .., ..]).to_owned(),
                self.kernel,
                self.stride,
                self.pad,
                self.dilation,
            );
            let out = w_mat.dot(&cols); // (out_ch, oh*ow)
            y.slice_mut(s![i, .., .., ..]).assign(
                &out.into_shape_with_order((self.out_ch, oh, ow)).unwrap(),
            );
        }
        if self.bias {
            let b = params.get(&self.bias_name());
            for ch in 0..self.out_ch {
                y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| v + b[[ch]]);
            }
        }
        (y, Conv2dCache { x: x.clone() })
    }

    /// Accumulates weight/bias grads and returns the input gradient.
    pub fn backward(
        &self,
        params: &mut Params,
        cache: &Conv2dCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let (n, _, h, w) = cache.x.dim();
        let (_, oc, oh, ow) = gy.dim();
        assert_eq!(oc, self.out_ch);
        let kk = self.in_ch * self.kernel * self.kernel;
        let w_mat = params
            .get(&self.weight_name())
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.out_ch, kk))
            .unwrap()
            .to_owned();

        let mut dw = Array2::<f64>::zeros((self.out_ch, kk));
        let mut dx = Array4::zeros(cache.x.dim());
        for i in 0..n {
            let cols = im2col(
                &cache.x.slice(s![i, .., .., ..]).to_owned(),
                self.kernel,
                self.stride,
                self.pad,
                self.dilation,
            );
            let gy_mat = gy
                .slice(s![i, .., .., ..])
                .into_shape_with_order((self.out_ch, oh * ow))
                .unwrap()
                .to_owned();
            dw += &gy_mat.dot(&cols.t());
            let dcols = w_mat.t().dot(&gy_mat); // (kk, oh*ow)
            let dxi = col2im(
                &dcols,
                self.in_ch,
                h,
                w,
                self.kernel,
                self.stride,
                self.pad,
                self.dilation,
            );
            dx.slice_mut(s![i, .., .., ..]).assign(&dxi);
        }
        params.accumulate_grad(
            &self.weight_name(),
            &dw.into_shape_with_order((self.out_ch, self.in_ch, self.kernel, self.kernel))
                .unwrap()
                .into_dyn(),
        );
        if self.bias {
            let db = gy.sum_axis(ndarray::Axis(0)).sum_axis(ndarray::Axis(1)).sum_axis(ndarray::Axis(1));
            params.accumulate_grad(&self.bias_name(), &db.into_dyn());
        }
        dx
    }
}

/// 2-D transposed convolution. Weight layout `(in_ch, out_ch, k, k)`;
/// output size `(in − 1)·stride − 2·pad + k`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

#[derive(Debug)]
pub struct ConvTranspose2dCache {
    x: Array4<f64>,
}

impl ConvTranspose2d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvTranspose2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            bias: false,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        // Fan-in per output unit of the equivalent gather formulation.
        let fan_in = self.in_ch * self.kernel * self.kernel / (self.stride * self.stride);
        let w = he_normal(
            rng,
            &[self.in_ch, self.out_ch, self.kernel, self.kernel],
            fan_in.max(1),
        );
        params.declare(&self.weight_name(), w, true);
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.pad,
            (w - 1) * self.stride + self.kernel - 2 * self.pad,
        )
    }

    /// Forward = the adjoint of a stride-`s` convolution: spread each input
    /// position through the kernel with col2im.
    pub fn forward(&self, params: &Params, x: &Array4<f64>) -> (Array4<f64>, ConvTranspose2dCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "{}: input channels", self.name);
        let (oh, ow) = self.out_dims(h, w);
        // Sanity: the paired conv maps (oh, ow) back to (h, w).
        debug_assert_eq!(conv_out_size(oh, self.kernel, self.stride, self.pad, 1), h);
        let okk = self.out_ch * self.kernel * self.kernel;
        let w_mat = params
            .get(&self.weight_name())
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.in_ch, okk))
            .unwrap()
            .to_owned();
        let mut y = Array4::zeros((n, self.out_ch, oh, ow));
        for i in 0..n {
            let x_mat = x
                .slice(s![i, .., .., ..])
                .into_shape_with_order((self.in_ch, h * w))
                .unwrap()
                .to_owned();
            let cols = w_mat.t().dot(&x_mat); // (okk, h*w)
            let yi = col2im(&cols, self.out_ch, oh, ow, self.kernel, self.stride, self.pad, 1);
            y.slice_mut(s![i, .., .., ..]).assign(&yi);
        }
        (y, ConvTranspose2dCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        params: &mut Params,
        cache: &ConvTranspose2dCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let (n, _, h, w) = cache.x.dim();
        let okk = self.out_ch * self.kernel * self.kernel;
        let w_mat = params
            .get(&self.weight_name())
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.in_ch, okk))
            .unwrap()
            .to_owned();
        let mut dw = Array2::<f64>::zeros((self.in_ch, okk));
        let mut dx = Array4::zeros(cache.x.dim());
        for i in 0..n {
            // dcols is the unfolding of gy under the paired conv geometry.
            let dcols = im2col(
                &gy.slice(s![i, .., .., ..]).to_owned(),
                self.kernel,
                self.stride,
                self.pad,
                1,
            ); // (okk, h*w)
            let x_mat = cache
                .x
                .slice(s![i, .., .., ..])
                .into_shape_with_order((self.in_ch, h * w))
                .unwrap()
                .to_owned();
            dw += &x_mat.dot(&dcols.t());
            let dx_mat = w_mat.dot(&dcols); // (in_ch, h*w)
            dx.slice_mut(s![i, .., .., ..]).assign(
                &dx_mat
                    .into_shape_with_order((self.in_ch, h, w))
                    .unwrap(),
            );
        }
        params.accumulate_grad(
            &self.weight_name(),
            &dw.into_shape_with_order((self.in_ch, self.out_ch, self.kernel, self.kernel))
                .unwrap()
                .into_dyn(),
        );
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::super::{central_diff, max_rel_error};
    use super::*;
    use crate::seed::rng_for;
    use ndarray::Array4;
    use rand::Rng;

    fn random4(shape: (usize, usize, usize, usize), tag: u64) -> Array4<f64> {
        let mut rng = rng_for(tag, "conv/test", &[]);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct 7-loop convolution oracle.
    fn naive_conv(
        x: &Array4<f64>,
        w: &Array4<f64>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Array4<f64> {
        let (n, ic, h, wd) = x.dim();
        let (oc, _, k, _) = w.dim();
        let oh = conv_out_size(h, k, stride, pad, dilation);
        let ow = conv_out_size(wd, k, stride, pad, dilation);
        let mut y = Array4::zeros((n, oc, oh, ow));
        for i in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ic {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                                    let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[[i, c, iy as usize, ix as usize]]
                                        * w[[o, c, ky, kx]];
                                }
                            }
                        }
                        y[[i, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_naive_loops() {
        for (stride, pad, dilation) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 3, 1)] {
            let conv = Conv2d::new("c", 3, 4, 3, stride, pad).with_dilation(dilation);
            let mut params = Params::new();
            let mut rng = rng_for(1, "conv/decl", &[stride as u64, pad as u64, dilation as u64]);
            conv.declare(&mut params, &mut rng);
            let x = random4((2, 3, 9, 9), 7);
            let (y, _) = conv.forward(&params, &x);
            let w = params
                .get("c/weight")
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            let want = naive_conv(&x, &w, stride, pad, dilation);
            let diff = (&y - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "s={stride} p={pad} d={dilation}: {diff}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let conv = Conv2d::new("c", 2, 3, 3, 2, 1).with_bias();
        let mut params = Params::new();
        let mut rng = rng_for(2, "conv/fd", &[]);
        conv.declare(&mut params, &mut rng);
        let x = random4((2, 2, 6, 6), 8);

        // Scalar objective: weighted sum of outputs (fixed random weights).
        let (y0, cache) = conv.forward(&params, &x);
        let mut rng2 = rng_for(3, "conv/obj", &[]);
        let obj_w = Array4::from_shape_fn(y0.dim(), |_| rng2.random_range(-1.0..1.0));

        params.zero_grads();
        let dx = conv.backward(&mut params, &cache, &obj_w);

        // Input gradient.
        let fd_x = central_diff(&x.clone().into_dyn(), 1e-5, |xd| {
            let xa = xd.view().into_dimensionality::<Ix4>().unwrap().to_owned();
            let (y, _) = conv.forward(&params, &xa);
            (&y * &obj_w).sum()
        });
        assert!(max_rel_error(&dx.into_dyn(), &fd_x) < 1e-6);

        // Weight gradient.
        let w0 = params.get("c/weight").clone();
        let fd_w = central_diff(&w0, 1e-5, |wd| {
            let mut p = params.clone();
            p.set("c/weight", wd.clone()).unwrap();
            let (y, _) = conv.forward(&p, &x);
            (&y * &obj_w).sum()
        });
        assert!(max_rel_error(params.grad("c/weight"), &fd_w) < 1e-6);

        // Bias gradient.
        let b0 = params.get("c/bias").clone();
        let fd_b = central_diff(&b0, 1e-5, |bd| {
            let mut p = params.clone();
            p.set("c/bias", bd.clone()).unwrap();
            let (y, _) = conv.forward(&p, &x);
            (&y * &obj_w).sum()
        });
        assert!(max_rel_error(params.grad("c/bias"), &fd_b) < 1e-6);
    }

    #[test]
    fn transpose_shapes_invert_the_paired_conv() {
        let t1 = ConvTranspose2d::new("t1", 8, 4, 8, 4, 2);
        assert_eq!(t1.out_dims(16, 16), (64, 64));
        assert_eq!(t1.out_dims(64, 64), (256, 256));
        let t2 = ConvTranspose2d::new("t2", 4, 2, 4, 2, 1);
        assert_eq!(t2.out_dims(64, 64), (128, 128));
        assert_eq!(t2.out_dims(256, 256), (512, 512));
    }

    #[test]
    fn transpose_is_the_adjoint_of_conv() {
        // <convT(x), z> == <x, conv(z)> when both use the same weight, with
        // conv weight (out,in,k,k) = convT weight (in,out,k,k) transposed.
        let tr = ConvTranspose2d::new("t", 3, 2, 4, 2, 1);
        let mut params = Params::new();
        let mut rng = rng_for(5, "convt/decl", &[]);
        tr.declare(&mut params, &mut rng);
        let x = random4((1, 3, 5, 5), 9);
        let (y, _) = tr.forward(&params, &x);
        assert_eq!(y.dim(), (1, 2, 10, 10));

        let z = random4((1, 2, 10, 10), 10);
        let wt = params
            .get("t/weight")
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        // Conv weight with swapped in/out axes.
        let mut wc = Array4::zeros((3, 2, 4, 4));
        for a in 0..3 {
            for b in 0..2 {
                for ky in 0..4 {
                    for kx in 0..4 {
                        wc[[a, b, ky, kx]] = wt[[a, b, ky, kx]];
                    }
                }
            }
        }
        let conv_z = naive_conv(&z, &wc, 2, 1, 1); // (1, 3, 5, 5)
        let lhs: f64 = (&y * &z).sum();
        let rhs: f64 = (&x * &conv_z).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        let tr = ConvTranspose2d::new("t", 3, 2, 4, 2, 1);
        let mut params = Params::new();
        let mut rng = rng_for(6, "convt/fd", &[]);
        tr.declare(&mut params, &mut rng);
        let x = random4((2, 3, 5, 5), 11);
        let (y0, cache) = tr.forward(&params, &x);
        let mut rng2 = rng_for(7, "convt/obj", &[]);
        let obj_w = Array4::from_shape_fn(y0.dim(), |_| rng2.random_range(-1.0..1.0));

        params.zero_grads();
        let dx = tr.backward(&mut params, &cache, &obj_w);

        let fd_x = central_diff(&x.clone().into_dyn(), 1e-5, |xd| {
            let xa = xd.view().into_dimensionality::<Ix4>().unwrap().to_owned();
            let (y, _) = tr.forward(&params, &xa);
            (&y * &obj_w).sum()
        });
        assert!(max_rel_error(&dx.into_dyn(), &fd_x) < 1e-6);

        let w0 = params.get("t/weight").clone();
        let fd_w = central_diff(&w0, 1e-5, |wd| {
            let mut p = params.clone();
            p.set("t/weight", wd.clone()).unwrap();
            let (y, _) = tr.forward(&p, &x);
            (&y * &obj_w).sum()
        });
        assert!(max_rel_error(params.grad("t/weight"), &fd_w) < 1e-6);
    }

    #[test]
    fn declared_shapes_are_as_documented() {
        let conv = Conv2d::new("c", 5, 7, 3, 1, 1);
        let mut params = Params::new();
        let mut rng = rng_for(8, "shape", &[]);
        conv.declare(&mut params, &mut rng);
        assert_eq!(params.get("c/weight").shape(), &[7, 5, 3, 3]);
    }
}

//! 2-D batch normalisation with running statistics.

use super::{Mode, Params};
use ndarray::{Array1, Array4, ArrayD, IxDyn};

/// BatchNorm over `(N, H, W)` per channel.
///
/// Parameters: `{name}/gamma`, `{name}/beta` (trainable) and
/// `{name}/running_mean`, `{name}/running_var` (buffers, saved and
/// transferred with the model but never touched by the optimizer).  Training
/// mode normalises by biased batch statistics and updates the running pair;
/// eval mode reads the running pair and is a pure function of the input.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug)]
pub struct BatchNormCache {
    mode: Mode,
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn pname(&self, suffix: &str) -> String {
        format!("{}/{suffix}", self.name)
    }

    pub fn declare(&self, params: &mut Params) {
        let c = self.channels;
        params.declare(&self.pname("gamma"), ArrayD::from_elem(IxDyn(&[c]), 1.0), true);
        params.declare(&self.pname("beta"), ArrayD::zeros(IxDyn(&[c])), true);
        params.declare(&self.pname("running_mean"), ArrayD::zeros(IxDyn(&[c])), false);
        params.declare(
            &self.pname("running_var"),
            ArrayD::from_elem(IxDyn(&[c]), 1.0),
            false,
        );
    }

    pub fn forward(
        &self,
        params: &mut Params,
        x: &Array4<f64>,
        mode: Mode,
    ) -> (Array4<f64>, BatchNormCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "{}: channels", self.name);
        let count = (n * h * w) as f64;

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let slice = x.slice(ndarray::s![.., ch, .., ..]);
                    let m = slice.sum() / count;
                    mean[ch] = m;
                    var[ch] = slice.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
                }
                // Update running stats (unbiased variance, torch convention).
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mut rm = params.get(&self.pname("running_mean")).clone();
                let mut rv = params.get(&self.pname("running_var")).clone();
                for ch in 0..c {
                    rm[[ch]] = (1.0 - self.momentum) * rm[[ch]] + self.momentum * mean[ch];
                    rv[[ch]] =
                        (1.0 - self.momentum) * rv[[ch]] + self.momentum * var[ch] * unbias;
                }
                params.set(&self.pname("running_mean"), rm).unwrap();
                params.set(&self.pname("running_var"), rv).unwrap();
                (mean, var)
            }
            Mode::Eval => {
                let rm = params.get(&self.pname("running_mean"));
                let rv = params.get(&self.pname("running_var"));
                (
                    Array1::from_shape_fn(c, |ch| rm[[ch]]),
                    Array1::from_shape_fn(c, |ch| rv[[ch]]),
                )
            }
        };

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let gamma = params.get(&self.pname("gamma")).clone();
        let beta = params.get(&self.pname("beta")).clone();
        let mut x_hat = Array4::zeros((n, c, h, w));
        let mut y = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let m = mean[ch];
            let is = inv_std[ch];
            let g = gamma[[ch]];
            let b = beta[[ch]];
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let xh = (x[[i, ch, yy, xx]] - m) * is;
                        x_hat[[i, ch, yy, xx]] = xh;
                        y[[i, ch, yy, xx]] = g * xh + b;
                    }
                }
            }
        }
        (
            y,
            BatchNormCache {
                mode,
                x_hat,
                inv_std,
            },
        )
    }

    pub fn backward(
        &self,
        params: &mut Params,
        cache: &BatchNormCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let (n, c, h, w) = gy.dim();
        let count = (n * h * w) as f64;
        let gamma = params.get(&self.pname("gamma")).clone();

        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ch in 0..c {
            let mut dg = 0.0;
            let mut db = 0.0;
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        dg += gy[[i, ch, yy, xx]] * cache.x_hat[[i, ch, yy, xx]];
                        db += gy[[i, ch, yy, xx]];
                    }
                }
            }
            dgamma[ch] = dg;
            dbeta[ch] = db;
        }

        let mut dx = Array4::zeros((n, c, h, w));
        match cache.mode {
            Mode::Train => {
                // Batch statistics participate in the graph:
                // dx = γ·inv_std/count · (count·gy − Σgy − x̂·Σ(gy·x̂)).
                for ch in 0..c {
                    let scale = gamma[[ch]] * cache.inv_std[ch] / count;
                    for i in 0..n {
                        for yy in 0..h {
                            for xx in 0..w {
                                dx[[i, ch, yy, xx]] = scale
                                    * (count * gy[[i, ch, yy, xx]]
                                        - dbeta[ch]
                                        - cache.x_hat[[i, ch, yy, xx]] * dgamma[ch]);
                            }
                        }
                    }
                }
            }
            Mode::Eval => {
                // Running stats are constants: the map is affine per channel.
                for ch in 0..c {
                    let scale = gamma[[ch]] * cache.inv_std[ch];
                    for i in 0..n {
                        for yy in 0..h {
                            for xx in 0..w {
                                dx[[i, ch, yy, xx]] = scale * gy[[i, ch, yy, xx]];
                            }
                        }
                    }
                }
            }
        }

        params.accumulate_grad(&self.pname("gamma"), &dgamma.into_dyn());
        params.accumulate_grad(&self.pname("beta"), &dbeta.into_dyn());
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

    fn setup() -> (BatchNorm2d, Params, Array4<f64>) {
        let bn = BatchNorm2d::new("bn", 3);
        let mut params = Params::new();
        bn.declare(&mut params);
        let mut rng = rng_for(1, "bn/x", &[]);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-2.0..2.0));
        (bn, params, x)
    }

    #[test]
    fn train_mode_normalizes_to_zero_mean_unit_var() {
        let (bn, mut params, x) = setup();
        let (y, _) = bn.forward(&mut params, &x, Mode::Train);
        for ch in 0..3 {
            let slice = y.slice(ndarray::s![.., ch, .., ..]);
            let n = slice.len() as f64;
            let mean = slice.sum() / n;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn eval_mode_is_pure_and_ignores_batch_stats() {
        let (bn, mut params, x) = setup();
        // Push some batches through to move the running stats off init.
        for _ in 0..5 {
            bn.forward(&mut params, &x, Mode::Train);
        }
        let hash_before = params.hash_prefix("bn/");
        let (y1, _) = bn.forward(&mut params, &x, Mode::Eval);
        let (y2, _) = bn.forward(&mut params, &(&x * 1.0), Mode::Eval);
        assert_eq!(y1, y2);
        assert_eq!(
            params.hash_prefix("bn/"),
            hash_before,
            "eval mode must not move running statistics"
        );
    }

    #[test]
    fn train_mode_updates_running_statistics() {
        let (bn, mut params, x) = setup();
        let before = params.get("bn/running_mean").clone();
        bn.forward(&mut params, &x, Mode::Train);
        assert_ne!(&before, params.get("bn/running_mean"));
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let (bn, mut params, x) = setup();
        let (y0, cache) = bn.forward(&mut params, &x, Mode::Train);
        let mut rng = rng_for(2, "bn/obj", &[]);
        let obj = Array4::from_shape_fn(y0.dim(), |_| rng.random_range(-1.0..1.0));

        params.zero_grads();
        let dx = bn.backward(&mut params, &cache, &obj);

        // Freeze the running-stat side effects out of the FD loop by
        // cloning params inside the closure.
        let fd_x = central_diff(&x.clone().into_dyn(), 1e-6, |xd| {
            let mut p = params.clone();
            let xa = xd.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
            let (y, _) = bn.forward(&mut p, &xa, Mode::Train);
            (&y * &obj).sum()
        });
        assert!(max_rel_error(&dx.into_dyn(), &fd_x) < 1e-5);

        for pname in ["bn/gamma", "bn/beta"] {
            let v0 = params.get(pname).clone();
            let fd = central_diff(&v0, 1e-6, |vd| {
                let mut p = params.clone();
                p.set(pname, vd.clone()).unwrap();
                let (y, _) = bn.forward(&mut p, &x, Mode::Train);
                (&y * &obj).sum()
            });
            assert!(max_rel_error(params.grad(pname), &fd) < 1e-6, "{pname}");
        }
    }

    #[test]
    fn eval_backward_matches_finite_differences() {
        let (bn, mut params, x) = setup();
        for _ in 0..3 {
            bn.forward(&mut params, &x, Mode::Train);
        }
        let (y0, cache) = bn.forward(&mut params, &x, Mode::Eval);
        let mut rng = rng_for(3, "bn/obj2", &[]);
        let obj = Array4::from_shape_fn(y0.dim(), |_| rng.random_range(-1.0..1.0));
        params.zero_grads();
        let dx = bn.backward(&mut params, &cache, &obj);
        // Eval mode is affine in x, so central differences carry no
        // truncation error; a large step suppresses roundoff instead.
        let fd_x = central_diff(&x.clone().into_dyn(), 1e-2, |xd| {
            let mut p = params.clone();
            let xa = xd.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
            let (y, _) = bn.forward(&mut p, &xa, Mode::Eval);
            (&y * &obj).sum()
        });
        assert!(max_rel_error(&dx.into_dyn(), &fd_x) < 1e-6);
    }
}

//! Atrous spatial pyramid pooling: parallel dilated 3×3 branches (rate 1 is
//! a plain 1×1), an image-pooling branch, and a 1×1 fusion projection.

use super::super::nn::{
    broadcast_spatial, broadcast_spatial_backward, global_avg_pool, global_avg_pool_backward,
    relu, relu_backward, BatchNorm2d, BatchNormCache, Conv2d, Conv2dCache, Mode, Params,
};
use crate::{IcssnError, Result};
use ndarray::{s, Array4};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct Branch {
    conv: Conv2d,
    bn: BatchNorm2d,
    dilation: usize,
}

/// Pyramid over `dilations`, plus global pooling, fused down to `out_ch`.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub in_ch: usize,
    pub out_ch: usize,
    branches: Vec<Branch>,
    pool_conv: Conv2d,
    pool_bn: BatchNorm2d,
    project: Conv2d,
    project_bn: BatchNorm2d,
}

#[derive(Debug)]
pub struct AsppCache {
    branches: Vec<(Conv2dCache, BatchNormCache, Array4<f64>)>,
    pool: (Conv2dCache, BatchNormCache, Array4<f64>),
    pool_in_dim: (usize, usize, usize, usize),
    project: (Conv2dCache, BatchNormCache, Array4<f64>),
}

impl Aspp {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, dilations: &[usize]) -> Result<Self> {
        if dilations.is_empty() {
            return Err(IcssnError::Config("aspp needs at least one dilation".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &d in dilations {
            if d == 0 {
                return Err(IcssnError::Config("aspp dilations must be positive".into()));
            }
            if !seen.insert(d) {
                return Err(IcssnError::Config(format!("duplicate aspp dilation {d}")));
            }
        }
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let cname = format!("{name}/branch{i}");
                let conv = if d == 1 {
                    Conv2d::new(cname.clone(), in_ch, out_ch, 1, 1, 0)
                } else {
                    Conv2d::new(cname.clone(), in_ch, out_ch, 3, 1, d).with_dilation(d)
                };
                Branch {
                    conv,
                    bn: BatchNorm2d::new(format!("{cname}/bn"), out_ch),
                    dilation: d,
                }
            })
            .collect::<Vec<_>>();
        let fused_ch = (branches.len() + 1) * out_ch;
        Ok(Aspp {
            in_ch,
            out_ch,
            branches,
            pool_conv: Conv2d::new(format!("{name}/pool"), in_ch, out_ch, 1, 1, 0),
            pool_bn: BatchNorm2d::new(format!("{name}/pool/bn"), out_ch),
            project: Conv2d::new(format!("{name}/project"), fused_ch, out_ch, 1, 1, 0),
            project_bn: BatchNorm2d::new(format!("{name}/project/bn"), out_ch),
        })
    }

    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for b in &self.branches {
            b.conv.declare(params, rng);
            b.bn.declare(params);
        }
        self.pool_conv.declare(params, rng);
        self.pool_bn.declare(params);
        self.project.declare(params, rng);
        self.project_bn.declare(params);
    }

    pub fn forward(&self, params: &mut Params, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, AsppCache) {
        let (n, _, h, w) = x.dim();
        let mut fused = Array4::zeros((n, (self.branches.len() + 1) * self.out_ch, h, w));
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        for (i, b) in self.branches.iter().enumerate() {
            // A dilated kernel wider than the map samples only zero padding
            // outside the centre tap, so the branch degenerates to a 1×1.
            // The arithmetic already produces exactly that; we just log it.
            let extent = b.dilation * (b.conv.kernel - 1) + 1;
            if extent > h.min(w) {
                log::warn!(
                    "aspp branch {i}: dilation {} exceeds {h}x{w} feature map; branch acts as 1x1",
                    b.dilation
                );
            }
            let (y, ccache) = b.conv.forward(params, x);
            let (y, bcache) = b.bn.forward(params, &y, mode);
            let (y, mask) = relu(&y);
            fused
                .slice_mut(s![.., i * self.out_ch..(i + 1) * self.out_ch, .., ..])
                .assign(&y);
            branch_caches.push((ccache, bcache, mask));
        }

        // Image pooling: squeeze to 1×1, project, re-broadcast.
        let pooled = global_avg_pool(x);
        let pooled4 = pooled.insert_axis(ndarray::Axis(2)).insert_axis(ndarray::Axis(3));
        let (py, pconv) = self.pool_conv.forward(params, &pooled4);
        let (py, pbn) = self.pool_bn.forward(params, &py, mode);
        let (py, pmask) = relu(&py);
        let flat = py.index_axis(ndarray::Axis(3), 0).index_axis(ndarray::Axis(2), 0).to_owned();
        let pool_ix = self.branches.len() * self.out_ch;
        fused
            .slice_mut(s![.., pool_ix.., .., ..])
            .assign(&broadcast_spatial(&flat, h, w));

        let (y, prconv) = self.project.forward(params, &fused);
        let (y, prbn) = self.project_bn.forward(params, &y, mode);
        let (y, prmask) = relu(&y);
        (
            y,
            AsppCache {
                branches: branch_caches,
                pool: (pconv, pbn, pmask),
                pool_in_dim: x.dim(),
                project: (prconv, prbn, prmask),
            },
        )
    }

    pub fn backward(&self, params: &mut Params, cache: &AsppCache, gy: &Array4<f64>) -> Array4<f64> {
        let g = relu_backward(&cache.project.2, gy);
        let g = self.project_bn.backward(params, &cache.project.1, &g);
        let g_fused = self.project.backward(params, &cache.project.0, &g);

        let mut dx = Array4::zeros(cache.pool_in_dim);
        for (i, b) in self.branches.iter().enumerate() {
            let gb = g_fused
                .slice(s![.., i * self.out_ch..(i + 1) * self.out_ch, .., ..])
                .to_owned();
            let gb = relu_backward(&cache.branches[i].2, &gb);
            let gb = b.bn.backward(params, &cache.branches[i].1, &gb);
            dx = &dx + &b.conv.backward(params, &cache.branches[i].0, &gb);
        }

        let pool_ix = self.branches.len() * self.out_ch;
        let g_pool = g_fused.slice(s![.., pool_ix.., .., ..]).to_owned();
        let g_flat = broadcast_spatial_backward(&g_pool);
        let g_py = g_flat.insert_axis(ndarray::Axis(2)).insert_axis(ndarray::Axis(3));
        let g_py = relu_backward(&cache.pool.2, &g_py);
        let g_py = self.pool_bn.backward(params, &cache.pool.1, &g_py);
        let g_pooled4 = self.pool_conv.backward(params, &cache.pool.0, &g_py);
        let g_pooled = g_pooled4.index_axis(ndarray::Axis(3), 0).index_axis(ndarray::Axis(2), 0).to_owned();
        dx = &dx + &global_avg_pool_backward(cache.pool_in_dim, &g_pooled);
        dx
    }
}

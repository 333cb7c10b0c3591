//! Residual backbone with dilated late stages (output stride 8).
//!
//! The stem halves resolution twice (7×7 stride-2 conv, then 3×3 stride-2
//! max pool); stage 2 halves it once more to reach stride 8.  Stages 3 and 4
//! keep that resolution by trading their usual stride for dilation (rates 2
//! and 4), so the stage-2 and stage-4 feature maps are spatially aligned and
//! can be concatenated without resampling.  Two taps are exposed: `f2` after
//! stage 2 and `f4` after stage 4.

use super::super::nn::{
    relu, relu_backward, BatchNorm2d, BatchNormCache, Conv2d, Conv2dCache, MaxPool2d,
    MaxPoolCache, Mode, Params,
};
use crate::{IcssnError, Result};
use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

/// Residual depths supported by [`Backbone::new`].
pub const SUPPORTED_DEPTHS: [usize; 3] = [18, 50, 101];

/// Conv → BatchNorm pair (no activation), the unit every block is built from.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug)]
struct ConvBnCache {
    conv: Conv2dCache,
    bn: BatchNormCache,
}

impl ConvBn {
    fn new(name: &str, conv: Conv2d) -> Self {
        let bn = BatchNorm2d::new(format!("{name}/bn"), conv.out_ch);
        ConvBn { conv, bn }
    }

    fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.conv.declare(params, rng);
        self.bn.declare(params);
    }

    fn forward(&self, params: &mut Params, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, ConvBnCache) {
        let (y, conv) = self.conv.forward(params, x);
        let (y, bn) = self.bn.forward(params, &y, mode);
        (y, ConvBnCache { conv, bn })
    }

    fn backward(&self, params: &mut Params, cache: &ConvBnCache, gy: &Array4<f64>) -> Array4<f64> {
        let g = self.bn.backward(params, &cache.bn, gy);
        self.conv.backward(params, &cache.conv, &g)
    }
}

/// Two 3×3 convolutions with an identity (or projected) skip — the
/// depth-18 block.
#[derive(Debug, Clone)]
struct BasicBlock {
    cb1: ConvBn,
    cb2: ConvBn,
    down: Option<ConvBn>,
}

/// 1×1 reduce → 3×3 → 1×1 expand (×4) — the depth-50/101 block.
#[derive(Debug, Clone)]
struct Bottleneck {
    cb1: ConvBn,
    cb2: ConvBn,
    cb3: ConvBn,
    down: Option<ConvBn>,
}

#[derive(Debug, Clone)]
enum Block {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
}

#[derive(Debug)]
struct BlockCache {
    stages: Vec<(ConvBnCache, Option<Array4<f64>>)>, // cache + relu mask after it
    down: Option<ConvBnCache>,
    out_relu: Array4<f64>,
}

impl Block {
    fn basic(name: &str, in_ch: usize, out_ch: usize, stride: usize, dilation: usize) -> Self {
        let cb1 = ConvBn::new(
            &format!("{name}/conv1"),
            Conv2d::new(format!("{name}/conv1"), in_ch, out_ch, 3, stride, dilation)
                .with_dilation(dilation),
        );
        let cb2 = ConvBn::new(
            &format!("{name}/conv2"),
            Conv2d::new(format!("{name}/conv2"), out_ch, out_ch, 3, 1, dilation)
                .with_dilation(dilation),
        );
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            ConvBn::new(
                &format!("{name}/down"),
                Conv2d::new(format!("{name}/down"), in_ch, out_ch, 1, stride, 0),
            )
        });
        Block::Basic(BasicBlock { cb1, cb2, down })
    }

    fn bottleneck(
        name: &str,
        in_ch: usize,
        width: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let out_ch = width * 4;
        let cb1 = ConvBn::new(
            &format!("{name}/conv1"),
            Conv2d::new(format!("{name}/conv1"), in_ch, width, 1, 1, 0),
        );
        let cb2 = ConvBn::new(
            &format!("{name}/conv2"),
            Conv2d::new(format!("{name}/conv2"), width, width, 3, stride, dilation)
                .with_dilation(dilation),
        );
        let cb3 = ConvBn::new(
            &format!("{name}/conv3"),
            Conv2d::new(format!("{name}/conv3"), width, out_ch, 1, 1, 0),
        );
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            ConvBn::new(
                &format!("{name}/down"),
                Conv2d::new(format!("{name}/down"), in_ch, out_ch, 1, stride, 0),
            )
        });
        Block::Bottleneck(Bottleneck { cb1, cb2, cb3, down })
    }

    fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        match self {
            Block::Basic(b) => {
                b.cb1.declare(params, rng);
                b.cb2.declare(params, rng);
                if let Some(d) = &b.down {
                    d.declare(params, rng);
                }
            }
            Block::Bottleneck(b) => {
                b.cb1.declare(params, rng);
                b.cb2.declare(params, rng);
                b.cb3.declare(params, rng);
                if let Some(d) = &b.down {
                    d.declare(params, rng);
                }
            }
        }
    }

    fn forward(&self, params: &mut Params, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, BlockCache) {
        let mut stages = Vec::new();
        let (main, down_cache, identity) = match self {
            Block::Basic(b) => {
                let (h1, c1) = b.cb1.forward(params, x, mode);
                let (h1, m1) = relu(&h1);
                stages.push((c1, Some(m1)));
                let (h2, c2) = b.cb2.forward(params, &h1, mode);
                stages.push((c2, None));
                match &b.down {
                    Some(d) => {
                        let (id, dc) = d.forward(params, x, mode);
                        (h2, Some(dc), id)
                    }
                    None => (h2, None, x.clone()),
                }
            }
            Block::Bottleneck(b) => {
                let (h1, c1) = b.cb1.forward(params, x, mode);
                let (h1, m1) = relu(&h1);
                stages.push((c1, Some(m1)));
                let (h2, c2) = b.cb2.forward(params, &h1, mode);
                let (h2, m2) = relu(&h2);
                stages.push((c2, Some(m2)));
                let (h3, c3) = b.cb3.forward(params, &h2, mode);
                stages.push((c3, None));
                match &b.down {
                    Some(d) => {
                        let (id, dc) = d.forward(params, x, mode);
                        (h3, Some(dc), id)
                    }
                    None => (h3, None, x.clone()),
                }
            }
        };
        let (y, out_relu) = relu(&(&main + &identity));
        (
            y,
            BlockCache {
                stages,
                down: down_cache,
                out_relu,
            },
        )
    }

    fn backward(&self, params: &mut Params, cache: &BlockCache, gy: &Array4<f64>) -> Array4<f64> {
        let g_sum = relu_backward(&cache.out_relu, gy);
        let mut g = g_sum.clone();
        match self {
            Block::Basic(b) => {
                g = b.cb2.backward(params, &cache.stages[1].0, &g);
                g = relu_backward(cache.stages[0].1.as_ref().unwrap(), &g);
                let dx_main = b.cb1.backward(params, &cache.stages[0].0, &g);
                match (&b.down, &cache.down) {
                    (Some(d), Some(dc)) => &dx_main + &d.backward(params, dc, &g_sum),
                    _ => &dx_main + &g_sum,
                }
            }
            Block::Bottleneck(b) => {
                g = b.cb3.backward(params, &cache.stages[2].0, &g);
                g = relu_backward(cache.stages[1].1.as_ref().unwrap(), &g);
                g = b.cb2.backward(params, &cache.stages[1].0, &g);
                g = relu_backward(cache.stages[0].1.as_ref().unwrap(), &g);
                let dx_main = b.cb1.backward(params, &cache.stages[0].0, &g);
                match (&b.down, &cache.down) {
                    (Some(d), Some(dc)) => &dx_main + &d.backward(params, dc, &g_sum),
                    _ => &dx_main + &g_sum,
                }
            }
        }
    }
}

/// The four-stage residual trunk.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub depth: usize,
    pub base_width: usize,
    stem: ConvBn,
    pool: MaxPool2d,
    layers: Vec<Vec<Block>>,
    f2_channels: usize,
    f4_channels: usize,
}

#[derive(Debug)]
pub struct BackboneCache {
    stem: ConvBnCache,
    stem_relu: Array4<f64>,
    pool: MaxPoolCache,
    layers: Vec<Vec<BlockCache>>,
}

impl Backbone {
    /// `name` is the parameter namespace prefix (e.g. `encoder/backbone`).
    pub fn new(name: &str, depth: usize, base_width: usize) -> Result<Self> {
        if !SUPPORTED_DEPTHS.contains(&depth) {
            return Err(IcssnError::Config(format!(
                "backbone depth {depth} unsupported (choose one of {SUPPORTED_DEPTHS:?})"
            )));
        }
        if base_width == 0 {
            return Err(IcssnError::Config("base width must be positive".into()));
        }
        let w = base_width;
        let counts: [usize; 4] = match depth {
            18 => [2, 2, 2, 2],
            50 => [3, 4, 6, 3],
            _ => [3, 4, 23, 3],
        };
        let widths = [w, 2 * w, 4 * w, 8 * w];
        // Stage 2 carries the final stride-2; stages 3/4 dilate instead.
        let strides = [1, 2, 1, 1];
        let dilations = [1, 1, 2, 4];
        let bottleneck = depth >= 50;

        let stem = ConvBn::new(
            &format!("{name}/stem"),
            Conv2d::new(format!("{name}/stem"), 3, w, 7, 2, 3),
        );
        let pool = MaxPool2d {
            kernel: 3,
            stride: 2,
            pad: 1,
        };

        let mut layers = Vec::with_capacity(4);
        let mut in_ch = w;
        for stage in 0..4 {
            let mut blocks = Vec::with_capacity(counts[stage]);
            for b in 0..counts[stage] {
                let bname = format!("{name}/layer{}/block{b}", stage + 1);
                let stride = if b == 0 { strides[stage] } else { 1 };
                let block = if bottleneck {
                    Block::bottleneck(&bname, in_ch, widths[stage], stride, dilations[stage])
                } else {
                    Block::basic(&bname, in_ch, widths[stage], stride, dilations[stage])
                };
                in_ch = if bottleneck { widths[stage] * 4 } else { widths[stage] };
                blocks.push(block);
            }
            layers.push(blocks);
        }

        let expansion = if bottleneck { 4 } else { 1 };
        Ok(Backbone {
            depth,
            base_width: w,
            stem,
            pool,
            layers,
            f2_channels: widths[1] * expansion,
            f4_channels: widths[3] * expansion,
        })
    }

    /// Channels of the stage-2 tap.
    pub fn f2_channels(&self) -> usize {
        self.f2_channels
    }

    /// Channels of the stage-4 tap.
    pub fn f4_channels(&self) -> usize {
        self.f4_channels
    }

    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.stem.declare(params, rng);
        for stage in &self.layers {
            for block in stage {
                block.declare(params, rng);
            }
        }
    }

    /// Runs the trunk and returns the stage-2 and stage-4 taps, both at 1/8
    /// of the input resolution.
    pub fn forward(
        &self,
        params: &mut Params,
        x: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array4<f64>, Array4<f64>, BackboneCache)> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(IcssnError::shape(
                "backbone_forward",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(IcssnError::shape(
                "backbone_forward",
                format!("input {h}x{w} not divisible by the output stride 8"),
            ));
        }

        let (y, stem) = self.stem.forward(params, x, mode);
        let (y, stem_relu) = relu(&y);
        let (mut y, pool) = self.pool.forward(&y);

        let mut layer_caches = Vec::with_capacity(4);
        let mut f2 = None;
        for (stage_ix, stage) in self.layers.iter().enumerate() {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (next, cache) = block.forward(params, &y, mode);
                y = next;
                caches.push(cache);
            }
            if stage_ix == 1 {
                f2 = Some(y.clone());
            }
            layer_caches.push(caches);
        }

        let f2 = f2.expect("stage 2 always runs");
        debug_assert_eq!(f2.dim().2, h / 8);
        debug_assert_eq!(y.dim().2, h / 8, "stage 4 must stay at stride 8");
        Ok((
            f2,
            y,
            BackboneCache {
                stem,
                stem_relu,
                pool,
                layers: layer_caches,
            },
        ))
    }

    /// Backpropagates tap gradients to the input.  `g_f2` joins the chain at
    /// the stage-2 output, where the stage-3 gradient also arrives.
    pub fn backward(
        &self,
        params: &mut Params,
        cache: &BackboneCache,
        g_f2: &Array4<f64>,
        g_f4: &Array4<f64>,
    ) -> Array4<f64> {
        let mut g = g_f4.clone();
        for stage_ix in (0..4).rev() {
            if stage_ix == 1 {
                g = &g + g_f2;
            }
            for (block, bcache) in self.layers[stage_ix]
                .iter()
                .zip(&cache.layers[stage_ix])
                .rev()
            {
                g = block.backward(params, bcache, &g);
            }
        }
        let g = self.pool.backward(&cache.pool, &g);
        let g = relu_backward(&cache.stem_relu, &g);
        self.stem.backward(params, &cache.stem, &g)
    }
}

//! Siamese object classifier over sample pairs.
//!
//! Two copies of the shared encoder (structurally shared: both read the same
//! parameter store) embed the pair, global pooling reduces each side to a
//! C-vector, and a small fully-connected stack predicts the joint class of
//! the pair — landslide/landslide, landslide/slope, slope/landslide, or
//! slope/slope.  Single tiles are classified by pairing them with
//! themselves and marginalizing the slot-A distribution.

use crate::data::{batch_tiles, ObjectClass, Sample, Tile};
use crate::encoder::{Encoder, EncoderCache};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward, relu,
    relu_backward, softmax_rows, Linear, LinearCache, Mode, Params,
};
use crate::seed::rng_for;
use crate::{IcssnError, Result};
use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probability floor used when taking logs of predicted distributions.
pub const PROB_EPSILON: f64 = 1e-12;

/// Joint class of an ordered sample pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JointLabel {
    /// landslide / landslide
    LL,
    /// landslide / slope
    LS,
    /// slope / landslide
    SL,
    /// slope / slope
    SS,
}

impl JointLabel {
    pub const ALL: [JointLabel; 4] = [JointLabel::LL, JointLabel::LS, JointLabel::SL, JointLabel::SS];

    pub fn from_classes(a: ObjectClass, b: ObjectClass) -> Self {
        match (a, b) {
            (ObjectClass::Landslide, ObjectClass::Landslide) => JointLabel::LL,
            (ObjectClass::Landslide, ObjectClass::Slope) => JointLabel::LS,
            (ObjectClass::Slope, ObjectClass::Landslide) => JointLabel::SL,
            (ObjectClass::Slope, ObjectClass::Slope) => JointLabel::SS,
        }
    }

    /// Position in the 4-way output vector.
    pub fn index(self) -> usize {
        match self {
            JointLabel::LL => 0,
            JointLabel::LS => 1,
            JointLabel::SL => 2,
            JointLabel::SS => 3,
        }
    }

    /// Classes of the two slots.
    pub fn slots(self) -> (ObjectClass, ObjectClass) {
        match self {
            JointLabel::LL => (ObjectClass::Landslide, ObjectClass::Landslide),
            JointLabel::LS => (ObjectClass::Landslide, ObjectClass::Slope),
            JointLabel::SL => (ObjectClass::Slope, ObjectClass::Landslide),
            JointLabel::SS => (ObjectClass::Slope, ObjectClass::Slope),
        }
    }
}

/// An ordered pair of samples with its joint label.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub a: Sample,
    pub b: Sample,
    pub joint_label: JointLabel,
}

impl PairSample {
    /// The label is derived from the members, so it can never disagree
    /// with them.
    pub fn new(a: Sample, b: Sample) -> Self {
        let joint_label = JointLabel::from_classes(a.object_label, b.object_label);
        PairSample { a, b, joint_label }
    }
}

/// Global pooling flavour for the pair embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Avg,
}

/// Output head layout.  The joint head predicts the four combinations
/// directly; the dual-binary head factorizes the pair distribution into two
/// independent per-slot binaries (an alternative reading of the same
/// architecture, kept behind this flag).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Joint4,
    DualBinary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden_units: usize,
    pub pooling: Pooling,
    pub fc_layers: usize,
    pub head: HeadKind,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden_units: 256,
            pooling: Pooling::Max,
            fc_layers: 2,
            head: HeadKind::Joint4,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fc_layers == 0 {
            return Err(IcssnError::Config("fc_layers must be at least 1".into()));
        }
        if self.hidden_units == 0 && self.fc_layers > 1 {
            return Err(IcssnError::Config("hidden_units must be positive".into()));
        }
        Ok(())
    }
}

/// Builds each epoch's pair roster: random pairing rebalanced so the four
/// joint classes are drawn in as equal measure as the batch permits.
/// Single-class batches yield only same-class pairs (logged).  The roster
/// size is `max(ceil(n/2), 4)` when both classes are present, `ceil(n/2)`
/// otherwise; identical seeds give identical rosters.
pub fn form_pairs(samples: &[Sample], seed: u64) -> Vec<PairSample> {
    if samples.is_empty() {
        return Vec::new();
    }
    let mut rng = rng_for(seed, "form_pairs", &[]);
    let landslides: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].object_label == ObjectClass::Landslide)
        .collect();
    let slopes: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].object_label == ObjectClass::Slope)
        .collect();

    // Cyclic shuffled queues so every sample is visited before any repeats.
    let mut queues: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let pools = [&landslides, &slopes];
    let mut draw = |class: usize, rng: &mut ChaCha8Rng| -> usize {
        if queues[class].is_empty() {
            queues[class] = pools[class].clone();
            queues[class].shuffle(rng);
        }
        queues[class].pop().expect("non-empty pool")
    };
    let mut draw_pair = |ca: usize, cb: usize, rng: &mut ChaCha8Rng| -> (usize, usize) {
        let a = draw(ca, rng);
        let mut b = draw(cb, rng);
        if ca == cb && pools[ca].len() > 1 {
            while b == a {
                b = draw(cb, rng);
            }
        }
        (a, b)
    };

    let half = samples.len().div_ceil(2);
    let mut pairs = Vec::new();
    if landslides.is_empty() || slopes.is_empty() {
        let class = if landslides.is_empty() { 1 } else { 0 };
        log::warn!(
            "form_pairs: single-class batch ({} samples); emitting only same-class pairs",
            samples.len()
        );
        for _ in 0..half {
            let (a, b) = draw_pair(class, class, &mut rng);
            pairs.push(PairSample::new(samples[a].clone(), samples[b].clone()));
        }
        return pairs;
    }

    let total = half.max(4);
    let base = total / 4;
    let extra = total % 4;
    for (k, joint) in JointLabel::ALL.into_iter().enumerate() {
        let quota = base + usize::from(k < extra);
        let (ca, cb) = joint.slots();
        let (ca, cb) = (
            usize::from(ca == ObjectClass::Slope),
            usize::from(cb == ObjectClass::Slope),
        );
        for _ in 0..quota {
            let (a, b) = draw_pair(ca, cb, &mut rng);
            pairs.push(PairSample::new(samples[a].clone(), samples[b].clone()));
        }
    }
    pairs.shuffle(&mut rng);
    pairs
}

enum PoolCache {
    Max(Vec<usize>),
    Avg,
}

pub struct ClassifierCache {
    enc_a: EncoderCache,
    enc_b: EncoderCache,
    feats_a: Array4<f64>,
    feats_b: Array4<f64>,
    feat_dim: (usize, usize, usize, usize),
    pool_a: PoolCache,
    pool_b: PoolCache,
    fc: Vec<(LinearCache, Option<Array2<f64>>)>,
    probs: Array2<f64>,
}

impl ClassifierCache {
    /// The encoder feature maps for the two slots, each `(N, C, h, w)`.
    pub fn features(&self) -> (&Array4<f64>, &Array4<f64>) {
        (&self.feats_a, &self.feats_b)
    }
}

/// The pair-classification head over a shared encoder.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    layers: Vec<Linear>,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, encoder_channels: usize) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.fc_layers);
        let mut in_features = 2 * encoder_channels;
        for i in 0..config.fc_layers {
            let name = format!("classifier/fc{}", i + 1);
            let last = i + 1 == config.fc_layers;
            let out_features = if last { 4 } else { config.hidden_units };
            let layer = if last {
                // Zero-init final layer: an untrained classifier answers
                // with the uniform distribution.
                Linear::new(name, in_features, out_features).with_zero_init()
            } else {
                Linear::new(name, in_features, out_features)
            };
            layers.push(layer);
            in_features = out_features;
        }
        Ok(Classifier { config, layers })
    }

    pub fn declare(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for layer in &self.layers {
            layer.declare(params, rng);
        }
    }

    fn pool(&self, x: &Array4<f64>) -> (Array2<f64>, PoolCache) {
        match self.config.pooling {
            Pooling::Max => {
                let (y, argmax) = global_max_pool(x);
                (y, PoolCache::Max(argmax))
            }
            Pooling::Avg => (global_avg_pool(x), PoolCache::Avg),
        }
    }

    fn pool_backward(&self, cache: &PoolCache, dim: (usize, usize, usize, usize), gy: &Array2<f64>) -> Array4<f64> {
        match cache {
            PoolCache::Max(argmax) => global_max_pool_backward(argmax, dim, gy),
            PoolCache::Avg => global_avg_pool_backward(dim, gy),
        }
    }

    fn head_probs(&self, logits: &Array2<f64>) -> Array2<f64> {
        match self.config.head {
            HeadKind::Joint4 => softmax_rows(logits),
            HeadKind::DualBinary => {
                // Logits [zAL, zAS, zBL, zBS] → p(joint) = pA ⊗ pB.
                let pa = softmax_rows(&logits.slice(s![.., 0..2]).to_owned());
                let pb = softmax_rows(&logits.slice(s![.., 2..4]).to_owned());
                let n = logits.dim().0;
                let mut joint = Array2::zeros((n, 4));
                for i in 0..n {
                    joint[[i, 0]] = pa[[i, 0]] * pb[[i, 0]];
                    joint[[i, 1]] = pa[[i, 0]] * pb[[i, 1]];
                    joint[[i, 2]] = pa[[i, 1]] * pb[[i, 0]];
                    joint[[i, 3]] = pa[[i, 1]] * pb[[i, 1]];
                }
                joint
            }
        }
    }

    /// Runs pair batches `a`/`b` (each `(N, 3, H, W)`) to joint-class
    /// probabilities `(N, 4)`; rows sum to 1.
    pub fn forward_batch(
        &self,
        encoder: &Encoder,
        params: &mut Params,
        a: &Array4<f64>,
        b: &Array4<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, ClassifierCache)> {
        if a.dim() != b.dim() {
            return Err(IcssnError::shape(
                "classify_pair",
                format!("slot shapes differ: {:?} vs {:?}", a.dim(), b.dim()),
            ));
        }
        let (fa, enc_a) = encoder.forward(params, a, mode)?;
        let (fb, enc_b) = encoder.forward(params, b, mode)?;
        let feat_dim = fa.dim();
        let (va, pool_a) = self.pool(&fa);
        let (vb, pool_b) = self.pool(&fb);
        let mut h = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .expect("pooled vectors share the batch axis");

        let mut fc = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, cache) = layer.forward(params, &h);
            if i + 1 < self.layers.len() {
                let (act, mask) = relu(&z);
                h = act;
                fc.push((cache, Some(mask)));
            } else {
                h = z;
                fc.push((cache, None));
            }
        }
        let probs = self.head_probs(&h);
        Ok((
            probs.clone(),
            ClassifierCache {
                enc_a,
                enc_b,
                feats_a: fa,
                feats_b: fb,
                feat_dim,
                pool_a,
                pool_b,
                fc,
                probs,
            },
        ))
    }

    /// Accumulates gradients of the mean cross-entropy over the batch.
    /// With `update_encoder == false` backpropagation stops at the pooled
    /// features (the frozen-encoder phases).
    pub fn backward_batch(
        &self,
        encoder: &Encoder,
        params: &mut Params,
        cache: &ClassifierCache,
        labels: &[JointLabel],
        update_encoder: bool,
    ) -> Result<()> {
        let n = cache.probs.dim().0;
        if labels.len() != n {
            return Err(IcssnError::invalid(
                "classification_backward",
                format!("{n} probability rows but {} labels", labels.len()),
            ));
        }
        // d(mean CE)/d(logits), shape (N, 4).
        let mut dlogits = Array2::zeros((n, 4));
        match self.config.head {
            HeadKind::Joint4 => {
                for (i, label) in labels.iter().enumerate() {
                    for k in 0..4 {
                        let y = f64::from(u8::from(k == label.index()));
                        dlogits[[i, k]] = (cache.probs[[i, k]] - y) / n as f64;
                    }
                }
            }
            HeadKind::DualBinary => {
                // Joint CE decomposes into the two slot CEs; each block is
                // an ordinary softmax gradient on its marginal.
                for (i, label) in labels.iter().enumerate() {
                    let pa_l = cache.probs[[i, 0]] + cache.probs[[i, 1]];
                    let pb_l = cache.probs[[i, 0]] + cache.probs[[i, 2]];
                    let (sa, sb) = label.slots();
                    let ya = f64::from(u8::from(sa == ObjectClass::Landslide));
                    let yb = f64::from(u8::from(sb == ObjectClass::Landslide));
                    dlogits[[i, 0]] = (pa_l - ya) / n as f64;
                    dlogits[[i, 1]] = ((1.0 - pa_l) - (1.0 - ya)) / n as f64;
                    dlogits[[i, 2]] = (pb_l - yb) / n as f64;
                    dlogits[[i, 3]] = ((1.0 - pb_l) - (1.0 - yb)) / n as f64;
                }
            }
        }

        let (ga, gb) = self.head_input_gradient(params, cache, dlogits);
        if update_encoder {
            let gfa = self.pool_backward(&cache.pool_a, cache.feat_dim, &ga);
            let gfb = self.pool_backward(&cache.pool_b, cache.feat_dim, &gb);
            encoder.backward(params, &cache.enc_a, &gfa);
            encoder.backward(params, &cache.enc_b, &gfb);
        }
        Ok(())
    }

    /// Backpropagates `dlogits` through the FC stack (accumulating its
    /// parameter gradients) and splits the result into the two pooled-vector
    /// gradients.
    fn head_input_gradient(
        &self,
        params: &mut Params,
        cache: &ClassifierCache,
        dlogits: Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut g = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (cache_i, _) = &cache.fc[i];
            g = layer.backward(params, cache_i, &g);
            // The mask belongs to the activation *before* this layer's
            // input, i.e. after layer i−1.
            if i > 0 {
                if let Some(m) = &cache.fc[i - 1].1 {
                    g = relu_backward(m, &g);
                }
            }
        }
        let c = cache.feat_dim.1;
        (
            g.slice(s![.., ..c]).to_owned(),
            g.slice(s![.., c..]).to_owned(),
        )
    }

    /// Gradients of an arbitrary logit functional w.r.t. the two encoder
    /// feature maps, each `(N, C, h, w)`.  `dlogits` is the functional's
    /// gradient at the head logits, `(N, 4)`.  FC parameter gradients are
    /// accumulated as a side effect; the encoder is left untouched.
    pub fn feature_gradients(
        &self,
        params: &mut Params,
        cache: &ClassifierCache,
        dlogits: &Array2<f64>,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        let n = cache.probs.dim().0;
        if dlogits.dim() != (n, 4) {
            return Err(IcssnError::shape(
                "feature_gradients",
                format!("dlogits {:?} does not match batch ({n}, 4)", dlogits.dim()),
            ));
        }
        let (ga, gb) = self.head_input_gradient(params, cache, dlogits.clone());
        Ok((
            self.pool_backward(&cache.pool_a, cache.feat_dim, &ga),
            self.pool_backward(&cache.pool_b, cache.feat_dim, &gb),
        ))
    }

    /// Single-pair inference: probabilities over {LL, LS, SL, SS}.
    pub fn classify_pair(
        &self,
        encoder: &Encoder,
        params: &mut Params,
        a: &Tile,
        b: &Tile,
    ) -> Result<[f64; 4]> {
        if a.size() != b.size() {
            return Err(IcssnError::shape(
                "classify_pair",
                format!("tile sizes differ: {} vs {}", a.size(), b.size()),
            ));
        }
        let xa = batch_tiles(&[a])?;
        let xb = batch_tiles(&[b])?;
        let (probs, _) = self.forward_batch(encoder, params, &xa, &xb, Mode::Eval)?;
        Ok([probs[[0, 0]], probs[[0, 1]], probs[[0, 2]], probs[[0, 3]]])
    }

    /// Classifies a single tile by pairing it with itself.
    pub fn infer_object_label(
        &self,
        encoder: &Encoder,
        params: &mut Params,
        tile: &Tile,
    ) -> Result<(ObjectClass, f64)> {
        let probs = self.classify_pair(encoder, params, tile, tile)?;
        Ok(decide_from_probs(&probs))
    }
}

/// Decision rule for self-paired inference: LL/SS argmax answers directly;
/// a mixed argmax falls back to the slot-A marginal, whose landslide mass
/// is `p(LL) + p(LS)`.  Returns the chosen class and its marginal mass.
pub fn decide_from_probs(probs: &[f64; 4]) -> (ObjectClass, f64) {
    let landslide_mass = probs[0] + probs[1];
    let argmax = probs
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).expect("finite probabilities"))
        .map(|(i, _)| i)
        .expect("four entries");
    let label = match argmax {
        0 => ObjectClass::Landslide,
        3 => ObjectClass::Slope,
        _ if landslide_mass >= 0.5 => ObjectClass::Landslide,
        _ => ObjectClass::Slope,
    };
    let confidence = match label {
        ObjectClass::Landslide => landslide_mass,
        ObjectClass::Slope => 1.0 - landslide_mass,
    };
    (label, confidence)
}

/// Mean cross-entropy `−log p(joint_label)` over the batch, with the
/// probability clamped to `PROB_EPSILON` so the value stays finite.
pub fn classification_loss(probs: &Array2<f64>, labels: &[JointLabel]) -> Result<f64> {
    let n = probs.dim().0;
    if labels.len() != n {
        return Err(IcssnError::invalid(
            "classification_loss",
            format!("{n} probability rows but {} labels", labels.len()),
        ));
    }
    if n == 0 {
        return Err(IcssnError::invalid("classification_loss", "empty batch"));
    }
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        // clamp (unlike max) lets a NaN probability poison the loss, so
        // numerical blow-ups surface instead of being floored away.
        total -= probs[[i, label.index()]].clamp(PROB_EPSILON, 1.0).ln();
    }
    Ok(total / n as f64)
}

/// Stacks pair rosters into the two slot batches plus the label list.
pub fn batch_pairs(pairs: &[PairSample]) -> Result<(Array4<f64>, Array4<f64>, Vec<JointLabel>)> {
    let a: Vec<&Tile> = pairs.iter().map(|p| &p.a.tile).collect();
    let b: Vec<&Tile> = pairs.iter().map(|p| &p.b.tile).collect();
    Ok((
        batch_tiles(&a)?,
        batch_tiles(&b)?,
        pairs.iter().map(|p| p.joint_label).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mask;
    use crate::encoder::EncoderConfig;
    use crate::nn::{central_diff, max_rel_error};
    use ndarray::{Array2 as A2, Array3};
    use rand::Rng;
    use std::collections::BTreeSet;

    fn sample(id: &str, class: ObjectClass, size: usize, seed: u64) -> Sample {
        let mut rng = rng_for(seed, "cls-test/sample", &[]);
        let pixels = Array3::from_shape_fn((size, size, 3), |_| rng.random_range(0..=255u32) as u8);
        let labels = match class {
            ObjectClass::Landslide => {
                let mut m = ndarray::Array2::zeros((size, size));
                m.slice_mut(s![..size / 2, ..size / 2]).fill(1u8);
                m
            }
            ObjectClass::Slope => ndarray::Array2::zeros((size, size)),
        };
        Sample::new(
            id,
            Tile::new(pixels, 2.0).unwrap(),
            Mask::new(labels).unwrap(),
        )
        .unwrap()
    }

    fn mixed_batch(n_land: usize, n_slope: usize, size: usize) -> Vec<Sample> {
        let mut out = Vec::new();
        for i in 0..n_land {
            out.push(sample(&format!("l{i}"), ObjectClass::Landslide, size, 100 + i as u64));
        }
        for i in 0..n_slope {
            out.push(sample(&format!("s{i}"), ObjectClass::Slope, size, 200 + i as u64));
        }
        out
    }

    fn desk_setup(config: ClassifierConfig) -> (Encoder, Classifier, Params) {
        let enc = Encoder::new(EncoderConfig {
            backbone_depth: 18,
            base_width: 2,
            output_channels: 4,
            aspp_dilations: vec![1, 2],
            se_reduction: 2,
        })
        .unwrap();
        let cls = Classifier::new(config, 4).unwrap();
        let mut params = Params::new();
        let mut rng = rng_for(41, "cls/init", &[]);
        enc.declare(&mut params, &mut rng);
        cls.declare(&mut params, &mut rng);
        (enc, cls, params)
    }

    fn small_config() -> ClassifierConfig {
        ClassifierConfig {
            hidden_units: 6,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn two_of_each_class_cover_all_joint_classes() {
        let batch = mixed_batch(2, 2, 8);
        let pairs = form_pairs(&batch, 7);
        assert_eq!(pairs.len(), 4);
        let seen: BTreeSet<usize> = pairs.iter().map(|p| p.joint_label.index()).collect();
        assert_eq!(seen.len(), 4, "expected all four joint classes");
        for p in &pairs {
            assert_eq!(
                p.joint_label,
                JointLabel::from_classes(p.a.object_label, p.b.object_label)
            );
        }
    }

    #[test]
    fn single_class_batch_yields_only_same_class_pairs() {
        let batch = mixed_batch(0, 5, 8);
        let pairs = form_pairs(&batch, 3);
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.joint_label == JointLabel::SS));
    }

    #[test]
    fn pairing_is_deterministic_in_the_seed() {
        let batch = mixed_batch(3, 3, 8);
        let ids = |pairs: &[PairSample]| -> Vec<(String, String)> {
            pairs
                .iter()
                .map(|p| (p.a.id.clone(), p.b.id.clone()))
                .collect()
        };
        assert_eq!(ids(&form_pairs(&batch, 5)), ids(&form_pairs(&batch, 5)));
        assert_ne!(ids(&form_pairs(&batch, 5)), ids(&form_pairs(&batch, 6)));
    }

    #[test]
    fn larger_batches_balance_the_quotas() {
        let batch = mixed_batch(8, 8, 8);
        let pairs = form_pairs(&batch, 11);
        assert_eq!(pairs.len(), 8);
        for joint in JointLabel::ALL {
            let count = pairs.iter().filter(|p| p.joint_label == joint).count();
            assert_eq!(count, 2, "{joint:?} quota");
        }
    }

    #[test]
    fn untrained_classifier_answers_uniformly() {
        let (enc, cls, mut params) = desk_setup(small_config());
        let a = sample("a", ObjectClass::Landslide, 16, 1);
        let b = sample("b", ObjectClass::Slope, 16, 2);
        let probs = cls.classify_pair(&enc, &mut params, &a.tile, &b.tile).unwrap();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-12, "zero-init head must be uniform");
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        for head in [HeadKind::Joint4, HeadKind::DualBinary] {
            let (enc, cls, mut params) = desk_setup(ClassifierConfig {
                head,
                ..small_config()
            });
            // Break the zero init so the distribution is non-trivial.
            let mut rng = rng_for(42, "cls/fill", &[]);
            let shape = params.get("classifier/fc2/weight").shape().to_vec();
            let w = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
                rng.random_range(-0.5..0.5)
            });
            params.set("classifier/fc2/weight", w).unwrap();
            let a = sample("a", ObjectClass::Landslide, 16, 3);
            let b = sample("b", ObjectClass::Slope, 16, 4);
            let probs = cls.classify_pair(&enc, &mut params, &a.tile, &b.tile).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dual_binary_head_factorizes() {
        let (enc, cls, mut params) = desk_setup(ClassifierConfig {
            head: HeadKind::DualBinary,
            ..small_config()
        });
        let mut rng = rng_for(43, "cls/fill2", &[]);
        let shape = params.get("classifier/fc2/weight").shape().to_vec();
        let w = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| rng.random_range(-0.5..0.5));
        params.set("classifier/fc2/weight", w).unwrap();
        let a = sample("a", ObjectClass::Landslide, 16, 5);
        let b = sample("b", ObjectClass::Slope, 16, 6);
        let p = cls.classify_pair(&enc, &mut params, &a.tile, &b.tile).unwrap();
        // Outer products satisfy p(LL)·p(SS) = p(LS)·p(SL).
        assert!((p[0] * p[3] - p[1] * p[2]).abs() < 1e-12);
    }

    #[test]
    fn mismatched_tile_sizes_are_rejected() {
        let (enc, cls, mut params) = desk_setup(small_config());
        let a = sample("a", ObjectClass::Landslide, 16, 7);
        let b = sample("b", ObjectClass::Slope, 24, 8);
        assert!(cls.classify_pair(&enc, &mut params, &a.tile, &b.tile).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let mut probs = A2::zeros((1, 4));
        probs[[0, 2]] = 1.0;
        assert_eq!(classification_loss(&probs, &[JointLabel::SL]).unwrap(), 0.0);

        let uniform = A2::from_elem((3, 4), 0.25);
        let labels = [JointLabel::LL, JointLabel::LS, JointLabel::SS];
        let loss = classification_loss(&uniform, &labels).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        // Zero probability at the label is clamped, not infinite.
        let zeros = A2::zeros((1, 4));
        let loss = classification_loss(&zeros, &[JointLabel::LL]).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn decision_rule_marginalizes_mixed_argmax() {
        assert_eq!(
            decide_from_probs(&[0.9, 0.0, 0.0, 0.1]).0,
            ObjectClass::Landslide
        );
        assert_eq!(decide_from_probs(&[0.1, 0.0, 0.0, 0.9]).0, ObjectClass::Slope);
        let (label, conf) = decide_from_probs(&[0.3, 0.3, 0.2, 0.2]);
        assert_eq!(label, ObjectClass::Landslide);
        assert!((conf - 0.6).abs() < 1e-12);
        let (label, conf) = decide_from_probs(&[0.2, 0.2, 0.3, 0.3]);
        assert_eq!(label, ObjectClass::Slope);
        assert!((conf - 0.6).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for (head, pooling) in [
            (HeadKind::Joint4, Pooling::Max),
            (HeadKind::Joint4, Pooling::Avg),
            (HeadKind::DualBinary, Pooling::Max),
        ] {
            let (enc, cls, mut params) = desk_setup(ClassifierConfig {
                hidden_units: 5,
                pooling,
                fc_layers: 2,
                head,
            });
            let batch = mixed_batch(2, 2, 8);
            let pairs = form_pairs(&batch, 9);
            let (xa, xb, labels) = batch_pairs(&pairs).unwrap();

            let (_, cache) = cls
                .forward_batch(&enc, &mut params, &xa, &xb, Mode::Train)
                .unwrap();
            params.zero_grads();
            cls.backward_batch(&enc, &mut params, &cache, &labels, true)
                .unwrap();

            for pname in ["classifier/fc1/weight", "classifier/fc2/weight", "encoder/se/fc2/weight"] {
                let v0 = params.get(pname).clone();
                let fd = central_diff(&v0, 1e-5, |vd| {
                    let mut p = params.clone();
                    p.set(pname, vd.clone()).unwrap();
                    let (probs, _) = cls
                        .forward_batch(&enc, &mut p, &xa, &xb, Mode::Train)
                        .unwrap();
                    classification_loss(&probs, &labels).unwrap() * labels.len() as f64
                });
                // backward accumulates the mean-CE gradient; FD above uses
                // the sum, so rescale.
                let analytic = params.grad(pname).mapv(|g| g * labels.len() as f64);
                assert!(
                    max_rel_error(&analytic, &fd) < 1e-4,
                    "{pname} under {head:?}/{pooling:?}"
                );
            }
        }
    }

    #[test]
    fn frozen_encoder_leaves_encoder_grads_empty() {
        let (enc, cls, mut params) = desk_setup(small_config());
        let batch = mixed_batch(2, 2, 8);
        let pairs = form_pairs(&batch, 13);
        let (xa, xb, labels) = batch_pairs(&pairs).unwrap();
        let (_, cache) = cls
            .forward_batch(&enc, &mut params, &xa, &xb, Mode::Eval)
            .unwrap();
        params.zero_grads();
        cls.backward_batch(&enc, &mut params, &cache, &labels, false)
            .unwrap();
        for name in params.names_with_prefix("encoder/") {
            assert!(
                params.grad(&name).iter().all(|&g| g == 0.0),
                "{name} received gradient while frozen"
            );
        }
        let fc_grads: f64 = params
            .names_with_prefix("classifier/")
            .iter()
            .map(|n| params.grad(n).mapv(f64::abs).sum())
            .sum();
        assert!(fc_grads > 0.0, "head must still learn");
    }
}

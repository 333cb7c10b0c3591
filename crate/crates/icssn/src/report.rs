//! Model complexity accounting and run reports.
//!
//! Two halves.  The first is an analytic parameter/FLOP counter that walks
//! the same constructor arithmetic as the real layers without allocating a
//! single tensor, so full-scale totals cost nothing to compute and the
//! desk-scale totals can be checked against an actual parameter store.  The
//! second is the set of serializable summaries a run directory distils to:
//! per-round training tables rendered from `rounds.json`, held-out metric
//! blocks, and the conventions every ratio was computed under.

use crate::classifier::{batch_pairs, form_pairs, ClassifierConfig, JointLabel};
use crate::data::{Mask, ObjectClass, Sample};
use crate::metrics::{
    dataset_confusion, object_level_accuracy, pixel_metrics, ConfusionCounts, ObjectAccuracy,
    ObjectRuleConfig, PixelMetrics, DEGENERATE_RATIO, PERFECT_ABSENCE_RATIO, REFERENCE_TILE_AREA,
};
use crate::nn::{conv_out_size, Mode};
use crate::nn::Params;
use crate::train::{predict_masks, Models, RoundLog, RunConfig};
use crate::{IcssnError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Parameter and forward-compute totals for one component.
///
/// FLOPs count one multiply–accumulate as two operations (plus bias adds);
/// elementwise normalisation, activation, and pooling work is omitted as
/// sub-permille noise next to the convolutions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    /// Parameters the optimizer updates.
    pub trainable_params: u64,
    /// Every stored parameter, including normalisation running statistics.
    pub total_params: u64,
    /// Forward-pass cost in GFLOPs at the reported tile size.
    pub gflops: f64,
}

impl std::ops::Add for Tally {
    type Output = Tally;
    fn add(self, rhs: Tally) -> Tally {
        Tally {
            trainable_params: self.trainable_params + rhs.trainable_params,
            total_params: self.total_params + rhs.total_params,
            gflops: self.gflops + rhs.gflops,
        }
    }
}

/// Walks layer shapes, accumulating a [`Tally`] while tracking the spatial
/// size exactly as the real forward pass would.
struct Counter {
    tally: Tally,
    h: usize,
    w: usize,
}

impl Counter {
    fn new(h: usize, w: usize) -> Self {
        Counter {
            tally: Tally::default(),
            h,
            w,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Rewinds the spatial cursor, e.g. for parallel branches over one input.
    fn at(&mut self, h: usize, w: usize) {
        self.h = h;
        self.w = w;
    }

    fn add_params(&mut self, n: u64) {
        self.tally.trainable_params += n;
        self.tally.total_params += n;
    }

    fn conv(
        &mut self,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
    ) {
        let oh = conv_out_size(self.h, k, stride, pad, dilation);
        let ow = conv_out_size(self.w, k, stride, pad, dilation);
        self.add_params((out_ch * in_ch * k * k + if bias { out_ch } else { 0 }) as u64);
        let macs = (oh * ow * out_ch * in_ch * k * k) as f64;
        let bias_adds = if bias { (oh * ow * out_ch) as f64 } else { 0.0 };
        self.tally.gflops += (2.0 * macs + bias_adds) / 1e9;
        self.h = oh;
        self.w = ow;
    }

    fn conv_transpose(&mut self, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) {
        // Scatter formulation: every input position spreads through every
        // kernel tap, so the MAC count rides on the *input* extent.
        let macs = (self.h * self.w * in_ch * out_ch * k * k) as f64;
        self.add_params((in_ch * out_ch * k * k) as u64);
        self.tally.gflops += 2.0 * macs / 1e9;
        self.h = (self.h - 1) * stride + k - 2 * pad;
        self.w = (self.w - 1) * stride + k - 2 * pad;
    }

    fn batch_norm(&mut self, channels: usize) {
        // Scale and shift train; the running statistics ride along.
        self.tally.trainable_params += 2 * channels as u64;
        self.tally.total_params += 4 * channels as u64;
    }

    fn linear(&mut self, in_features: usize, out_features: usize) {
        self.add_params((out_features * in_features + out_features) as u64);
        self.tally.gflops += (2 * in_features * out_features + out_features) as f64 / 1e9;
    }

    fn max_pool(&mut self, k: usize, stride: usize, pad: usize) {
        self.h = (self.h + 2 * pad - k) / stride + 1;
        self.w = (self.w + 2 * pad - k) / stride + 1;
    }
}

/// Counts the residual trunk; returns the two tap widths `(f2, f4)`.
fn count_backbone(c: &mut Counter, depth: usize, base_width: usize) -> (usize, usize) {
    let w = base_width;
    let counts: [usize; 4] = match depth {
        18 => [2, 2, 2, 2],
        50 => [3, 4, 6, 3],
        _ => [3, 4, 23, 3],
    };
    let widths = [w, 2 * w, 4 * w, 8 * w];
    let strides = [1, 2, 1, 1];
    let dilations = [1, 1, 2, 4];
    let bottleneck = depth >= 50;

    c.conv(3, w, 7, 2, 3, 1, false);
    c.batch_norm(w);
    c.max_pool(3, 2, 1);

    let mut in_ch = w;
    for stage in 0..4 {
        for b in 0..counts[stage] {
            let stride = if b == 0 { strides[stage] } else { 1 };
            let d = dilations[stage];
            let (h0, w0) = c.dims();
            let out_ch = if bottleneck { widths[stage] * 4 } else { widths[stage] };
            if bottleneck {
                let width = widths[stage];
                c.conv(in_ch, width, 1, 1, 0, 1, false);
                c.batch_norm(width);
                c.conv(width, width, 3, stride, d, d, false);
                c.batch_norm(width);
                c.conv(width, out_ch, 1, 1, 0, 1, false);
                c.batch_norm(out_ch);
            } else {
                c.conv(in_ch, out_ch, 3, stride, d, d, false);
                c.batch_norm(out_ch);
                c.conv(out_ch, out_ch, 3, 1, d, d, false);
                c.batch_norm(out_ch);
            }
            if stride != 1 || in_ch != out_ch {
                // Projection skip, fed from the block input.
                let (h1, w1) = c.dims();
                c.at(h0, w0);
                c.conv(in_ch, out_ch, 1, stride, 0, 1, false);
                c.batch_norm(out_ch);
                debug_assert_eq!(c.dims(), (h1, w1));
            }
            in_ch = out_ch;
        }
    }
    let expansion = if bottleneck { 4 } else { 1 };
    (widths[1] * expansion, widths[3] * expansion)
}

/// Counts the pyramid: one conv+norm per dilation (rate 1 is a 1×1), the
/// image-pooling branch, and the fusion projection.
fn count_aspp(c: &mut Counter, in_ch: usize, out_ch: usize, dilations: &[usize]) {
    let (h, w) = c.dims();
    for &d in dilations {
        c.at(h, w);
        if d == 1 {
            c.conv(in_ch, out_ch, 1, 1, 0, 1, false);
        } else {
            c.conv(in_ch, out_ch, 3, 1, d, d, false);
        }
        c.batch_norm(out_ch);
    }
    // Image pooling: the 1×1 conv sees a single spatial position.
    c.at(1, 1);
    c.conv(in_ch, out_ch, 1, 1, 0, 1, false);
    c.batch_norm(out_ch);
    // Fusion over the concatenated branch stack.
    c.at(h, w);
    c.conv((dilations.len() + 1) * out_ch, out_ch, 1, 1, 0, 1, false);
    c.batch_norm(out_ch);
}

fn count_se(c: &mut Counter, channels: usize, reduction: usize) {
    c.linear(channels, channels / reduction);
    c.linear(channels / reduction, channels);
}

fn count_classifier_head(c: &mut Counter, cfg: &ClassifierConfig, encoder_channels: usize) {
    let mut in_features = 2 * encoder_channels;
    for i in 0..cfg.fc_layers {
        let last = i + 1 == cfg.fc_layers;
        let out_features = if last { 4 } else { cfg.hidden_units };
        c.linear(in_features, out_features);
        in_features = out_features;
    }
}

fn count_decoder(c: &mut Counter, in_ch: usize) {
    let mid = in_ch / 2;
    let low = in_ch / 4;
    c.conv_transpose(in_ch, mid, 8, 4, 2);
    c.batch_norm(mid);
    c.conv_transpose(mid, low, 4, 2, 1);
    c.batch_norm(low);
    c.conv(low, 2, 1, 1, 0, 1, true);
}

/// Per-component and per-branch size/compute totals at the configured tile
/// size.  Classification FLOPs cover one pair (two encoder passes plus the
/// head); segmentation FLOPs cover one tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub tile_size: usize,
    pub backbone: Tally,
    pub aspp: Tally,
    pub se: Tally,
    /// Sum of the three shared-encoder components.
    pub encoder: Tally,
    pub classifier_head: Tally,
    pub decoder: Tally,
    pub classification_branch: Tally,
    pub segmentation_branch: Tally,
}

/// Counts parameters and forward FLOPs for every component analytically.
pub fn complexity(cfg: &RunConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    let t = cfg.data.tile_size;

    let mut bb = Counter::new(t, t);
    let (f2, f4) = count_backbone(&mut bb, cfg.encoder.backbone_depth, cfg.encoder.base_width);
    let (fh, fw) = bb.dims();

    let mut aspp = Counter::new(fh, fw);
    count_aspp(
        &mut aspp,
        f2 + f4,
        cfg.encoder.output_channels,
        &cfg.encoder.aspp_dilations,
    );

    let mut se = Counter::new(1, 1);
    count_se(&mut se, cfg.encoder.output_channels, cfg.encoder.se_reduction);

    let mut head = Counter::new(1, 1);
    count_classifier_head(&mut head, &cfg.classifier, cfg.encoder.output_channels);

    let mut dec = Counter::new(fh, fw);
    count_decoder(&mut dec, cfg.encoder.output_channels);

    let encoder = bb.tally + aspp.tally + se.tally;
    let classification_branch = Tally {
        trainable_params: encoder.trainable_params + head.tally.trainable_params,
        total_params: encoder.total_params + head.tally.total_params,
        // The siamese slots each run the shared encoder once.
        gflops: 2.0 * encoder.gflops + head.tally.gflops,
    };
    let segmentation_branch = encoder + dec.tally;
    Ok(ComplexityReport {
        tile_size: t,
        backbone: bb.tally,
        aspp: aspp.tally,
        se: se.tally,
        encoder,
        classifier_head: head.tally,
        decoder: dec.tally,
        classification_branch,
        segmentation_branch,
    })
}

/// The scaling and tie-break rules a report's numbers were computed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    /// Score of a 0/0 ratio when the class is absent from prediction and
    /// truth alike.
    pub perfect_absence_ratio: f64,
    /// Score of any other 0/0 ratio.
    pub degenerate_ratio: f64,
    /// Object-rule thresholds in force after tile-area scaling.
    pub object_rule: ObjectRuleConfig,
    /// Tile area the base thresholds are stated for.
    pub reference_tile_area: u64,
    pub tile_size: usize,
    /// Contrastive weight λ.
    pub lambda: f64,
    /// Contrastive temperature τ.
    pub tau: f64,
}

impl Conventions {
    pub fn for_config(cfg: &RunConfig) -> Conventions {
        let area = (cfg.data.tile_size * cfg.data.tile_size) as u64;
        Conventions {
            perfect_absence_ratio: PERFECT_ABSENCE_RATIO,
            degenerate_ratio: DEGENERATE_RATIO,
            object_rule: ObjectRuleConfig::default().scaled_for(area),
            reference_tile_area: REFERENCE_TILE_AREA,
            tile_size: cfg.data.tile_size,
            lambda: cfg.segmentation.lambda,
            tau: cfg.segmentation.tau,
        }
    }
}

/// Best result of one branch within one round (or across the whole run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchBest {
    pub round: usize,
    pub phase: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub val_metrics: BTreeMap<String, f64>,
}

/// One row of the per-round progress table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub improved: bool,
    pub classification: Option<BranchBest>,
    pub segmentation: Option<BranchBest>,
}

/// The round log condensed to per-round bests and overall winners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub config_hash: String,
    pub stop_reason: Option<String>,
    pub rounds: Vec<RoundRow>,
    pub best_classification: Option<BranchBest>,
    pub best_segmentation: Option<BranchBest>,
}

/// Lowest-validation-loss phase of `branch` among phases passing `pred`.
fn best_phase(
    log: &RoundLog,
    branch: &str,
    pred: impl Fn(usize) -> bool,
) -> Option<BranchBest> {
    log.phases
        .iter()
        .filter(|p| p.branch.as_deref() == Some(branch) && pred(p.round))
        .filter_map(|p| p.best_val_loss.map(|loss| (loss, p)))
        .min_by(|(a, _), (b, _)| a.total_cmp(b))
        .map(|(loss, p)| BranchBest {
            round: p.round,
            phase: p.phase.clone(),
            best_epoch: p.best_epoch,
            best_val_loss: loss,
            val_metrics: p.val_metrics.clone(),
        })
}

/// Condenses a round log into the per-round table plus overall bests.
pub fn summarize_rounds(log: &RoundLog) -> TrainingSummary {
    let rounds = log
        .rounds
        .iter()
        .map(|r| RoundRow {
            round: r.round,
            improved: r.improved,
            classification: best_phase(log, "classification", |round| round == r.round),
            segmentation: best_phase(log, "segmentation", |round| round == r.round),
        })
        .collect();
    TrainingSummary {
        seed: log.seed,
        config_hash: log.config_hash.clone(),
        stop_reason: log.stop_reason.clone(),
        rounds,
        best_classification: best_phase(log, "classification", |_| true),
        best_segmentation: best_phase(log, "segmentation", |_| true),
    }
}

/// Held-out pair-classifier metrics: the 4-way joint accuracy plus the
/// binary per-slot confusion ratios (landslide as the positive class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEval {
    pub pairs: usize,
    pub joint_accuracy: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Runs the classifier over seed-fixed pairs of `samples` and tallies both
/// the joint 4-way accuracy and the per-slot binary metrics.
pub fn evaluate_classifier(
    models: &Models,
    params: &mut Params,
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
) -> Result<ClassificationEval> {
    if samples.is_empty() {
        return Err(IcssnError::invalid("evaluate_classifier", "no samples"));
    }
    let pairs = form_pairs(samples, seed);
    let mut joint_correct = 0usize;
    let mut counts = ConfusionCounts::default();
    for chunk in pairs.chunks(batch_size.max(1)) {
        let (a, b, labels) = batch_pairs(chunk)?;
        let (probs, _) = models
            .classifier
            .forward_batch(&models.encoder, params, &a, &b, Mode::Eval)?;
        for (i, label) in labels.iter().enumerate() {
            let row = probs.row(i);
            let argmax = (0..4).max_by(|&p, &q| row[p].total_cmp(&row[q])).unwrap();
            joint_correct += usize::from(argmax == label.index());
            let (pa, pb) = JointLabel::ALL[argmax].slots();
            let (ta, tb) = label.slots();
            for (pred, truth) in [(pa, ta), (pb, tb)] {
                match (pred == ObjectClass::Landslide, truth == ObjectClass::Landslide) {
                    (true, true) => counts.tp += 1,
                    (true, false) => counts.fp += 1,
                    (false, true) => counts.fn_ += 1,
                    (false, false) => counts.tn += 1,
                }
            }
        }
    }
    // The ratio arithmetic is shared with the pixel suite: accuracy is the
    // "pixel accuracy" of the slot tally.
    let m = pixel_metrics(&counts)?;
    Ok(ClassificationEval {
        pairs: pairs.len(),
        joint_accuracy: joint_correct as f64 / pairs.len() as f64,
        accuracy: m.pa,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
    })
}

/// Held-out segmenter metrics: the pixel suite plus the object-level rules
/// at thresholds scaled for the evaluated tile area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEval {
    pub samples: usize,
    pub pixel: PixelMetrics,
    pub object: ObjectAccuracy,
    /// The thresholds actually applied.
    pub thresholds: ObjectRuleConfig,
}

/// Predicts masks for `samples` and scores them at pixel and object level.
pub fn evaluate_segmenter(
    models: &Models,
    params: &mut Params,
    samples: &[Sample],
    batch_size: usize,
) -> Result<SegmentationEval> {
    if samples.is_empty() {
        return Err(IcssnError::invalid("evaluate_segmenter", "no samples"));
    }
    let preds = predict_masks(models, params, samples, batch_size)?;
    let truths: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let labels: Vec<ObjectClass> = samples.iter().map(|s| s.object_label).collect();
    let pixel = pixel_metrics(&dataset_confusion(&preds, &truths)?)?;
    let (h, w) = samples[0].mask.shape();
    let thresholds = ObjectRuleConfig::default().scaled_for((h * w) as u64);
    let object = object_level_accuracy(&preds, &truths, &labels, &thresholds)?;
    Ok(SegmentationEval {
        samples: samples.len(),
        pixel,
        object,
        thresholds,
    })
}

/// Everything a run distils to: complexity, conventions, the training
/// summary, and — when a held-out evaluation ran — the final metric blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub complexity: ComplexityReport,
    pub conventions: Conventions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationEval>,
}

impl RunReport {
    /// Complexity and conventions for `cfg`; the optional blocks start empty.
    pub fn for_config(cfg: &RunConfig) -> Result<RunReport> {
        Ok(RunReport {
            complexity: complexity(cfg)?,
            conventions: Conventions::for_config(cfg),
            training: None,
            classification: None,
            segmentation: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// Console rendering: one aligned table per populated block.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let c = &self.complexity;
        let _ = writeln!(out, "Model complexity ({0}x{0} tiles)", c.tile_size);
        let _ = writeln!(
            out,
            "  {:<24} {:>12} {:>12} {:>10}",
            "component", "params", "trainable", "GFLOPs"
        );
        for (name, t) in [
            ("backbone", c.backbone),
            ("aspp", c.aspp),
            ("se", c.se),
            ("encoder (shared)", c.encoder),
            ("classifier head", c.classifier_head),
            ("decoder", c.decoder),
            ("classification branch", c.classification_branch),
            ("segmentation branch", c.segmentation_branch),
        ] {
            let _ = writeln!(
                out,
                "  {:<24} {:>12} {:>12} {:>10.3}",
                name, t.total_params, t.trainable_params, t.gflops
            );
        }

        if let Some(tr) = &self.training {
            let _ = writeln!(out, "\nTraining rounds (seed {})", tr.seed);
            let _ = writeln!(
                out,
                "  {:>5} {:>14} {:>10} {:>14} {:>8} {:>8} {:>9}",
                "round", "cls val loss", "pair acc", "seg val loss", "mIoU", "F1", "improved"
            );
            for row in &tr.rounds {
                let cls = row.classification.as_ref();
                let seg = row.segmentation.as_ref();
                let metric = |b: Option<&BranchBest>, key: &str| {
                    b.and_then(|b| b.val_metrics.get(key).copied())
                        .map_or("-".into(), |v| format!("{v:.4}"))
                };
                let loss =
                    |b: Option<&BranchBest>| b.map_or("-".into(), |b| format!("{:.4}", b.best_val_loss));
                let _ = writeln!(
                    out,
                    "  {:>5} {:>14} {:>10} {:>14} {:>8} {:>8} {:>9}",
                    row.round,
                    loss(cls),
                    metric(cls, "pair_accuracy"),
                    loss(seg),
                    metric(seg, "miou"),
                    metric(seg, "f1"),
                    if row.improved { "yes" } else { "no" },
                );
            }
            if let Some(reason) = &tr.stop_reason {
                let _ = writeln!(out, "  stopped: {reason}");
            }
        }

        if let Some(seg) = &self.segmentation {
            let p = &seg.pixel;
            let _ = writeln!(out, "\nSegmentation, held out ({} samples)", seg.samples);
            let _ = writeln!(
                out,
                "  {:>8} {:>10} {:>8} {:>15} {:>11} {:>8} {:>8}",
                "PA", "precision", "recall", "landslide IoU", "slope IoU", "mIoU", "F1"
            );
            let _ = writeln!(
                out,
                "  {:>8.4} {:>10.4} {:>8.4} {:>15.4} {:>11.4} {:>8.4} {:>8.4}",
                p.pa, p.precision, p.recall, p.landslide_iou, p.slope_iou, p.miou, p.f1
            );
            let o = &seg.object;
            let _ = writeln!(
                out,
                "  object level: landslide {:.4}, slope {:.4}, average {:.4} (hit >= {}, false alarm <= {})",
                o.acc_landslide,
                o.acc_slope,
                o.acc_avg,
                seg.thresholds.landslide_hit_threshold,
                seg.thresholds.slope_fp_threshold,
            );
        }

        if let Some(cls) = &self.classification {
            let _ = writeln!(out, "\nClassification, held out ({} pairs)", cls.pairs);
            let _ = writeln!(
                out,
                "  {:>10} {:>9} {:>10} {:>8} {:>8}",
                "joint acc", "accuracy", "precision", "recall", "F1"
            );
            let _ = writeln!(
                out,
                "  {:>10.4} {:>9.4} {:>10.4} {:>8.4} {:>8.4}",
                cls.joint_accuracy, cls.accuracy, cls.precision, cls.recall, cls.f1
            );
        }

        let v = &self.conventions;
        let _ = writeln!(
            out,
            "\nConventions: 0/0 -> {} on perfect absence ({} otherwise); \
             object thresholds {}/{} (stated for {} px tiles); lambda {}, tau {}",
            v.perfect_absence_ratio,
            v.degenerate_ratio,
            v.object_rule.landslide_hit_threshold,
            v.object_rule.slope_fp_threshold,
            v.reference_tile_area,
            v.lambda,
            v.tau,
        );
        out
    }
}

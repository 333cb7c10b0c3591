//! Pixel-level metrics (accuracy, precision, recall, IoU, mIoU, F1) and the
//! object-level accuracy rules.
//!
//! Dataset-level pixel metrics are micro-averaged: confusion counts are
//! summed across samples first and ratios are taken once at the end.

use crate::data::{Mask, ObjectClass};
use crate::error::{IcssnError, Result};
use serde::{Deserialize, Serialize};

/// Value of a 0/0 metric when the class is absent from both the prediction
/// and the truth — nothing to find, nothing found, scored as perfect.
pub const PERFECT_ABSENCE_RATIO: f64 = 1.0;
/// Value of any other 0/0 metric (e.g. precision with no predicted positives
/// while positives were missed).
pub const DEGENERATE_RATIO: f64 = 0.0;

/// Pixel-level confusion tally, class 1 (landslide) being "positive".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Total pixels evaluated.
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, rhs: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + rhs.tp,
            tn: self.tn + rhs.tn,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> ConfusionCounts {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

/// Tallies one prediction against its truth. Masks must be aligned.
pub fn confusion_counts(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(IcssnError::shape(
            "confusion_counts",
            format!("pred {:?} vs truth {:?}", pred.shape(), truth.shape()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels.iter().zip(truth.labels.iter()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Micro-aggregated confusion over a batch of mask pairs.
pub fn dataset_confusion(preds: &[Mask], truths: &[Mask]) -> Result<ConfusionCounts> {
    if preds.len() != truths.len() {
        return Err(IcssnError::invalid(
            "dataset_confusion",
            format!("{} predictions vs {} truths", preds.len(), truths.len()),
        ));
    }
    let mut total = ConfusionCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        total = total + confusion_counts(p, t)?;
    }
    Ok(total)
}

/// The full pixel-metric suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    /// Pixel accuracy: (TP+TN)/total.
    pub pa: f64,
    /// TP/(TP+FP).
    pub precision: f64,
    /// TP/(TP+FN).
    pub recall: f64,
    /// Landslide-class IoU: TP/(TP+FP+FN).
    pub landslide_iou: f64,
    /// Slope-class IoU: TN/(TN+FN+FP).
    pub slope_iou: f64,
    /// Unweighted mean of the two class IoUs.
    pub miou: f64,
    /// Harmonic mean of precision and recall.
    pub f1: f64,
}

/// A ratio with the documented 0/0 conventions: `perfect_absence` says
/// whether a zero denominator means the class was absent from both masks.
fn ratio(num: u64, den: u64, perfect_absence: bool) -> f64 {
    if den == 0 {
        if perfect_absence {
            PERFECT_ABSENCE_RATIO
        } else {
            DEGENERATE_RATIO
        }
    } else {
        num as f64 / den as f64
    }
}

/// Computes every pixel metric from a confusion tally.
///
/// Requires at least one evaluated pixel.
pub fn pixel_metrics(c: &ConfusionCounts) -> Result<PixelMetrics> {
    if c.total() == 0 {
        return Err(IcssnError::invalid("pixel_metrics", "no pixels evaluated"));
    }
    let no_positives_anywhere = c.tp + c.fp + c.fn_ == 0;
    let pa = ratio(c.tp + c.tn, c.total(), false);
    let precision = ratio(c.tp, c.tp + c.fp, no_positives_anywhere);
    let recall = ratio(c.tp, c.tp + c.fn_, no_positives_anywhere);
    let landslide_iou = ratio(c.tp, c.tp + c.fp + c.fn_, true);
    let slope_iou = ratio(c.tn, c.tn + c.fn_ + c.fp, true);
    let f1 = if precision + recall == 0.0 {
        DEGENERATE_RATIO
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PixelMetrics {
        pa,
        precision,
        recall,
        landslide_iou,
        slope_iou,
        miou: (landslide_iou + slope_iou) / 2.0,
        f1,
    })
}

/// Thresholds for the object-level decision rules, stated for 512×512 tiles
/// and scalable to other tile areas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectRuleConfig {
    /// A landslide sample counts as found when at least this many predicted
    /// pixels fall inside the true landslide.
    pub landslide_hit_threshold: u64,
    /// A slope sample counts as correct when at most this many pixels are
    /// predicted as landslide.
    pub slope_fp_threshold: u64,
}

impl Default for ObjectRuleConfig {
    fn default() -> Self {
        ObjectRuleConfig {
            landslide_hit_threshold: 400,
            slope_fp_threshold: 100,
        }
    }
}

/// The tile area the default thresholds are calibrated for.
pub const REFERENCE_TILE_AREA: u64 = 512 * 512;

impl ObjectRuleConfig {
    /// Rescales both thresholds by `tile_area / 512²`, rounding to the
    /// nearest pixel and keeping each threshold at least 1.
    pub fn scaled_for(&self, tile_area: u64) -> ObjectRuleConfig {
        let scale = tile_area as f64 / REFERENCE_TILE_AREA as f64;
        let rescale = |t: u64| ((t as f64 * scale).round() as u64).max(1);
        ObjectRuleConfig {
            landslide_hit_threshold: rescale(self.landslide_hit_threshold),
            slope_fp_threshold: rescale(self.slope_fp_threshold),
        }
    }
}

/// Object-level accuracies: per class and their equal-weight mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectAccuracy {
    pub acc_landslide: f64,
    pub acc_slope: f64,
    pub acc_avg: f64,
}

/// Applies the object-level rules sample by sample.
///
/// A landslide sample is correct when `|pred ∩ truth| ≥ landslide_hit_threshold`;
/// a slope sample is correct when its predicted landslide pixel count is
/// `≤ slope_fp_threshold` (both thresholds inclusive). A class with no
/// samples scores [`PERFECT_ABSENCE_RATIO`] vacuously.
pub fn object_level_accuracy(
    preds: &[Mask],
    truths: &[Mask],
    labels: &[ObjectClass],
    cfg: &ObjectRuleConfig,
) -> Result<ObjectAccuracy> {
    if preds.len() != truths.len() || preds.len() != labels.len() {
        return Err(IcssnError::invalid(
            "object_level_accuracy",
            format!(
                "{} preds, {} truths, {} labels",
                preds.len(),
                truths.len(),
                labels.len()
            ),
        ));
    }
    let (mut slide_total, mut slide_hit) = (0u64, 0u64);
    let (mut slope_total, mut slope_hit) = (0u64, 0u64);
    for ((pred, truth), &label) in preds.iter().zip(truths).zip(labels) {
        let truth_positives = truth.positive_count();
        match label {
            ObjectClass::Landslide => {
                if truth_positives == 0 {
                    return Err(IcssnError::invalid(
                        "object_level_accuracy",
                        "sample labelled landslide has an empty truth mask",
                    ));
                }
                slide_total += 1;
                if pred.intersection_count(truth)? >= cfg.landslide_hit_threshold {
                    slide_hit += 1;
                }
            }
            ObjectClass::Slope => {
                if truth_positives != 0 {
                    return Err(IcssnError::invalid(
                        "object_level_accuracy",
                        "sample labelled slope has landslide pixels in its truth mask",
                    ));
                }
                slope_total += 1;
                if pred.positive_count() <= cfg.slope_fp_threshold {
                    slope_hit += 1;
                }
            }
        }
    }
    let acc_landslide = ratio(slide_hit, slide_total, true);
    let acc_slope = ratio(slope_hit, slope_total, true);
    Ok(ObjectAccuracy {
        acc_landslide,
        acc_slope,
        acc_avg: (acc_landslide + acc_slope) / 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask_from(rows: &[&[u8]]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let labels = Array2::from_shape_fn((h, w), |(y, x)| rows[y][x]);
        Mask::new(labels).unwrap()
    }

    fn random_mask(size: usize, density: f64, tag: u64) -> Mask {
        let mut rng = rng_for(tag, "metrics/mask", &[]);
        Mask::new(Array2::from_shape_fn((size, size), |_| {
            u8::from(rng.random_bool(density))
        }))
        .unwrap()
    }

    /// Dumb per-pixel oracle for the confusion tally.
    fn brute_force_counts(pred: &Mask, truth: &Mask) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        let (h, w) = pred.shape();
        for y in 0..h {
            for x in 0..w {
                let p = pred.labels[[y, x]];
                let t = truth.labels[[y, x]];
                if p == 1 && t == 1 {
                    c.tp += 1;
                } else if p == 0 && t == 0 {
                    c.tn += 1;
                } else if p == 1 {
                    c.fp += 1;
                } else {
                    c.fn_ += 1;
                }
            }
        }
        c
    }

    #[test]
    fn identical_all_ones_masks_are_pure_tp() {
        let m = mask_from(&[&[1; 4]; 4].map(|r| &r[..]));
        let c = confusion_counts(&m, &m).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 16,
                ..Default::default()
            }
        );
    }

    #[test]
    fn shifted_block_counts_match_hand_tally() {
        // Truth: 2×2 block at columns 1–2; pred: same block shifted one
        // column right. Overlap is the middle column pair.
        let truth = mask_from(&[
            &[0, 1, 1, 0],
            &[0, 1, 1, 0],
            &[0, 0, 0, 0],
            &[0, 0, 0, 0],
        ]);
        let pred = mask_from(&[
            &[0, 0, 1, 1],
            &[0, 0, 1, 1],
            &[0, 0, 0, 0],
            &[0, 0, 0, 0],
        ]);
        let c = confusion_counts(&pred, &truth).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 2,
                fp: 2,
                fn_: 2,
                tn: 10
            }
        );
        let m = pixel_metrics(&c).unwrap();
        assert_abs_diff_eq!(m.precision, 0.5);
        assert_abs_diff_eq!(m.recall, 0.5);
        assert_abs_diff_eq!(m.f1, 0.5);
        assert_abs_diff_eq!(m.landslide_iou, 1.0 / 3.0);
        assert_abs_diff_eq!(m.pa, 0.75);
        assert_abs_diff_eq!(m.slope_iou, 10.0 / 14.0);
        assert_abs_diff_eq!(m.miou, (1.0 / 3.0 + 10.0 / 14.0) / 2.0);
    }

    #[test]
    fn all_zero_masks_are_pure_tn_and_score_perfect() {
        let m = mask_from(&[&[0; 4]; 4].map(|r| &r[..]));
        let c = confusion_counts(&m, &m).unwrap();
        assert_eq!(c.tn, 16);
        let pm = pixel_metrics(&c).unwrap();
        assert_eq!(pm.precision, 1.0);
        assert_eq!(pm.recall, 1.0);
        assert_eq!(pm.landslide_iou, 1.0);
        assert_eq!(pm.slope_iou, 1.0);
        assert_eq!(pm.miou, 1.0);
        assert_eq!(pm.f1, 1.0);
        assert_eq!(pm.pa, 1.0);
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let truth = random_mask(32, 0.3, 5);
        let c = confusion_counts(&truth, &truth).unwrap();
        let m = pixel_metrics(&c).unwrap();
        for v in [m.pa, m.precision, m.recall, m.landslide_iou, m.slope_iou, m.miou, m.f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn degenerate_ratios_follow_the_conventions() {
        // Pred empty, truth has positives: precision 0/0 but recall 0/n.
        let c = ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 5,
            tn: 11,
            };
        let m = pixel_metrics(&c).unwrap();
        assert_eq!(m.precision, DEGENERATE_RATIO);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.landslide_iou, 0.0);
        assert_eq!(m.f1, DEGENERATE_RATIO);

        // Everything TP: slope class absent from both → slope metrics perfect.
        let c = ConfusionCounts {
            tp: 9,
            ..Default::default()
        };
        let m = pixel_metrics(&c).unwrap();
        assert_eq!(m.slope_iou, PERFECT_ABSENCE_RATIO);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = Mask::new(Array2::zeros((4, 4))).unwrap();
        let b = Mask::new(Array2::zeros((4, 5))).unwrap();
        assert!(confusion_counts(&a, &b).is_err());
    }

    #[test]
    fn confusion_matches_brute_force_on_random_masks() {
        for tag in 0..20 {
            let pred = random_mask(31, 0.4, 100 + tag);
            let truth = random_mask(31, 0.25, 200 + tag);
            let fast = confusion_counts(&pred, &truth).unwrap();
            assert_eq!(fast, brute_force_counts(&pred, &truth));
            assert_eq!(fast.total(), 31 * 31);
        }
    }

    #[test]
    fn micro_aggregation_equals_concatenated_recompute() {
        let preds: Vec<Mask> = (0..6).map(|i| random_mask(17, 0.35, 300 + i)).collect();
        let truths: Vec<Mask> = (0..6).map(|i| random_mask(17, 0.30, 400 + i)).collect();
        let agg = dataset_confusion(&preds, &truths).unwrap();
        let by_hand: ConfusionCounts = preds
            .iter()
            .zip(&truths)
            .map(|(p, t)| brute_force_counts(p, t))
            .sum();
        assert_eq!(agg, by_hand);
    }

    #[test]
    fn landslide_rule_threshold_is_inclusive() {
        // Truth: 400 landslide pixels; pred covers exactly those 400.
        let mut truth = Array2::zeros((512, 512));
        let mut pred = Array2::zeros((512, 512));
        let mut placed = 0;
        'outer: for y in 0..512 {
            for x in 0..512 {
                truth[[y, x]] = 1;
                pred[[y, x]] = 1;
                placed += 1;
                if placed == 400 {
                    break 'outer;
                }
            }
        }
        let truth = Mask::new(truth).unwrap();
        let pred = Mask::new(pred).unwrap();
        let acc = object_level_accuracy(
            &[pred.clone()],
            &[truth.clone()],
            &[ObjectClass::Landslide],
            &ObjectRuleConfig::default(),
        )
        .unwrap();
        assert_eq!(acc.acc_landslide, 1.0);

        // One pixel fewer and the sample no longer counts.
        let mut short = pred.labels.clone();
        short[[0, 0]] = 0;
        let acc = object_level_accuracy(
            &[Mask::new(short).unwrap()],
            &[truth],
            &[ObjectClass::Landslide],
            &ObjectRuleConfig::default(),
        )
        .unwrap();
        assert_eq!(acc.acc_landslide, 0.0);
    }

    #[test]
    fn clean_slope_sample_is_correct() {
        let empty = Mask::zeros(512);
        let acc = object_level_accuracy(
            &[empty.clone()],
            &[empty.clone()],
            &[ObjectClass::Slope],
            &ObjectRuleConfig::default(),
        )
        .unwrap();
        assert_eq!(acc.acc_slope, 1.0);
        assert_eq!(acc.acc_avg, 1.0);
    }

    #[test]
    fn average_accuracy_matches_reference_arithmetic() {
        // 50 landslide samples with 45 hits (0.90) and 50 slope samples with
        // 39 clean (0.78) average to 0.84 exactly.
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        let mut labels = Vec::new();
        let hit = {
            let mut m = Array2::zeros((64, 64));
            for y in 0..32 {
                for x in 0..32 {
                    m[[y, x]] = 1;
                }
            }
            Mask::new(m).unwrap()
        };
        let cfg = ObjectRuleConfig::default().scaled_for(64 * 64);
        assert_eq!(cfg.landslide_hit_threshold, 6);
        assert_eq!(cfg.slope_fp_threshold, 2);
        for i in 0..50 {
            truths.push(hit.clone());
            labels.push(ObjectClass::Landslide);
            preds.push(if i < 45 { hit.clone() } else { Mask::zeros(64) });
        }
        let dirty = {
            let mut m = Array2::zeros((64, 64));
            for x in 0..10 {
                m[[0, x]] = 1;
            }
            Mask::new(m).unwrap()
        };
        for i in 0..50 {
            truths.push(Mask::zeros(64));
            labels.push(ObjectClass::Slope);
            preds.push(if i < 39 { Mask::zeros(64) } else { dirty.clone() });
        }
        let acc = object_level_accuracy(&preds, &truths, &labels, &cfg).unwrap();
        assert_abs_diff_eq!(acc.acc_landslide, 0.90);
        assert_abs_diff_eq!(acc.acc_slope, 0.78);
        assert_abs_diff_eq!(acc.acc_avg, 0.84);
    }

    #[test]
    fn thresholds_scale_with_tile_area() {
        let scaled = ObjectRuleConfig::default().scaled_for(128 * 128);
        assert_eq!(scaled.landslide_hit_threshold, 25);
        assert_eq!(scaled.slope_fp_threshold, 6);
        let identity = ObjectRuleConfig::default().scaled_for(512 * 512);
        assert_eq!(identity, ObjectRuleConfig::default());
    }

    #[test]
    fn label_mask_inconsistency_is_rejected() {
        let positive = mask_from(&[&[1, 0], &[0, 0]]);
        let empty = Mask::zeros(2);
        // Slope label with landslide pixels in truth.
        assert!(object_level_accuracy(
            &[empty.clone()],
            &[positive.clone()],
            &[ObjectClass::Slope],
            &ObjectRuleConfig::default()
        )
        .is_err());
        // Landslide label with empty truth.
        assert!(object_level_accuracy(
            &[positive],
            &[empty],
            &[ObjectClass::Landslide],
            &ObjectRuleConfig::default()
        )
        .is_err());
    }

    proptest! {
        /// F1 from precision/recall equals its algebraic form
        /// 2TP/(2TP+FP+FN), and every metric stays in [0,1].
        #[test]
        fn f1_identity_and_ranges(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            prop_assume!(tp + tn + fp + fn_ > 0);
            let c = ConfusionCounts { tp, tn, fp, fn_ };
            let m = pixel_metrics(&c).unwrap();
            let algebraic = if 2 * tp + fp + fn_ == 0 {
                PERFECT_ABSENCE_RATIO
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            prop_assert!((m.f1 - algebraic).abs() < 1e-12);
            prop_assert!((m.miou - (m.landslide_iou + m.slope_iou) / 2.0).abs() < 1e-15);
            for v in [m.pa, m.precision, m.recall, m.landslide_iou, m.slope_iou, m.miou, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

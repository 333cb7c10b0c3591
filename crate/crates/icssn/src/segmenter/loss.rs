//! The segmentation losses: the supervised contrastive term over block
//! vectors, the per-pixel cross-entropy, and their weighted combination.

use super::socl::{derive_socl_labels, select_socl_pairs_chw, SoclPairBatch};
use super::SegLossConfig;
use crate::data::Mask;
use crate::encoder::FeatureMap;
use crate::{IcssnError, Result};
use ndarray::{Array1, Array3, Array4, ArrayView3};

/// Probability clamp for the cross-entropy logs.
pub const CE_EPSILON: f64 = 1e-12;

fn check_unit(batch: &SoclPairBatch) -> Result<()> {
    for v in batch.positives.iter().chain(&batch.negatives) {
        let norm: f64 = v.v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(IcssnError::invalid(
                "supervised_contrastive_loss",
                format!("vector at block ({}, {}) has norm {norm:.9}", v.y, v.x),
            ));
        }
    }
    Ok(())
}

/// Per-anchor/per-positive term: −log[e^{sp/τ} / (e^{sp/τ} + Σ e^{sn/τ})],
/// computed as a stable log-sum-exp of {0} ∪ {(sn − sp)/τ}.
fn contrast_term(sp: f64, neg_sims: &[f64], tau: f64) -> f64 {
    let shifted: Vec<f64> = neg_sims.iter().map(|sn| (sn - sp) / tau).collect();
    let m = shifted.iter().copied().fold(0.0f64, f64::max);
    let sum = (-m).exp() + shifted.iter().map(|x| (x - m).exp()).sum::<f64>();
    m + sum.ln()
}

/// Mean over anchors of the Eq.-style contrastive objective.  Every
/// selected positive acts as an anchor against the remaining positives and
/// all negatives.  Fewer than two positives → 0 (nothing to contrast).
pub fn supervised_contrastive_loss(batch: &SoclPairBatch) -> Result<f64> {
    check_unit(batch)?;
    Ok(contrastive_with_grad(batch)?.0)
}

/// Loss plus gradients with respect to the *unit* vectors, in batch order
/// (positives then negatives).
pub fn contrastive_with_grad(
    batch: &SoclPairBatch,
) -> Result<(f64, Vec<Array1<f64>>, Vec<Array1<f64>>)> {
    check_unit(batch)?;
    let pos = &batch.positives;
    let neg = &batch.negatives;
    let tau = batch.tau;
    if tau <= 0.0 {
        return Err(IcssnError::invalid(
            "supervised_contrastive_loss",
            format!("temperature {tau} must be positive"),
        ));
    }
    let np = pos.len();
    let nn = neg.len();
    let dim = pos
        .first()
        .map(|v| v.v.len())
        .or_else(|| neg.first().map(|v| v.v.len()))
        .unwrap_or(0);
    let mut dpos = vec![Array1::zeros(dim); np];
    let mut dneg = vec![Array1::zeros(dim); nn];
    if np < 2 {
        return Ok((0.0, dpos, dneg));
    }

    // Pairwise similarities.
    let sim_pp = |a: usize, p: usize| pos[a].v.dot(&pos[p].v);
    let sims_pn: Vec<Vec<f64>> = (0..np)
        .map(|a| (0..nn).map(|n| pos[a].v.dot(&neg[n].v)).collect())
        .collect();

    let anchors = np as f64;
    let partners = (np - 1) as f64;
    let mut total = 0.0;
    for a in 0..np {
        for p in 0..np {
            if p == a {
                continue;
            }
            let sp = sim_pp(a, p);
            total += contrast_term(sp, &sims_pn[a], tau) / (partners * anchors);

            // Weights w_n = e^{(sn−sp)/τ} / (1 + Σ e^{(sn'−sp)/τ}).
            let m = sims_pn[a]
                .iter()
                .map(|sn| (sn - sp) / tau)
                .fold(0.0f64, f64::max);
            let denom = (-m).exp()
                + sims_pn[a]
                    .iter()
                    .map(|sn| ((sn - sp) / tau - m).exp())
                    .sum::<f64>();
            let scale = 1.0 / (tau * partners * anchors);
            let mut w_sum = 0.0;
            for n in 0..nn {
                let w = ((sims_pn[a][n] - sp) / tau - m).exp() / denom;
                w_sum += w;
                // d term / d s_an = w; s_an = u_a · u_n.
                dpos[a] = &dpos[a] + &(&neg[n].v * (w * scale));
                dneg[n] = &dneg[n] + &(&pos[a].v * (w * scale));
            }
            // d term / d s_ap = −Σ w.
            dpos[a] = &dpos[a] - &(&pos[p].v * (w_sum * scale));
            dpos[p] = &dpos[p] - &(&pos[a].v * (w_sum * scale));
        }
    }
    Ok((total, dpos, dneg))
}

/// Mean binary cross-entropy over pixels.  `logits` is `(2, H, W)` (class 0
/// = slope, class 1 = landslide); the class-1 probability is the softmax of
/// the two logits, clamped to `[CE_EPSILON, 1 − CE_EPSILON]`.
/// Returns the loss and `d loss / d logits` (same shape, already averaged).
pub fn pixel_ce_with_grad(logits: &ArrayView3<f64>, mask: &Mask) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = logits.dim();
    if c != 2 || (h, w) != mask.shape() {
        return Err(IcssnError::shape(
            "pixel_cross_entropy",
            format!("logits {c}x{h}x{w} vs mask {:?}", mask.shape()),
        ));
    }
    let count = (h * w) as f64;
    let mut grad = Array3::zeros((2, h, w));
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let z0 = logits[[0, y, x]];
            let z1 = logits[[1, y, x]];
            // p1 = softmax(z)₁ = σ(z1 − z0), computed stably.
            let p1 = 1.0 / (1.0 + (z0 - z1).exp());
            let p1c = p1.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
            let yv = f64::from(mask.labels[[y, x]]);
            total -= yv * p1c.ln() + (1.0 - yv) * (1.0 - p1c).ln();
            let d = (p1 - yv) / count;
            grad[[1, y, x]] = d;
            grad[[0, y, x]] = -d;
        }
    }
    Ok((total / count, grad))
}

/// Spec-shaped wrapper: `(H, W, 2)` logits → scalar loss.
pub fn pixel_cross_entropy(logits: &Array3<f64>, mask: &Mask) -> Result<f64> {
    let chw: Array3<f64> = logits.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
    Ok(pixel_ce_with_grad(&chw.view(), mask)?.0)
}

/// Breakdown of one combined-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SegLossParts {
    pub total: f64,
    pub ce: f64,
    pub contrastive: f64,
    /// The grid offered no positive blocks, so the contrastive term is 0.
    pub contrastive_empty: bool,
}

/// Combined per-sample loss `CE + λ·Contrastive` with gradients.
/// `logits` is `(2, H, W)`; `feat` is the `(C, H/b, W/b)` encoder output
/// aligned with the SOCL grid of `mask` at block size `cfg.block`.
/// Returns the parts plus gradients w.r.t. logits and features.
pub fn segmentation_loss_with_grad(
    logits: &ArrayView3<f64>,
    mask: &Mask,
    feat: &ArrayView3<f64>,
    cfg: &SegLossConfig,
    seed: u64,
) -> Result<(SegLossParts, Array3<f64>, Array3<f64>)> {
    cfg.validate()?;
    let (ce, dlogits) = pixel_ce_with_grad(logits, mask)?;
    let mut dfeat = Array3::zeros(feat.dim());

    if cfg.lambda == 0.0 {
        return Ok((
            SegLossParts {
                total: ce,
                ce,
                contrastive: 0.0,
                contrastive_empty: false,
            },
            dlogits,
            dfeat,
        ));
    }

    let grid = derive_socl_labels(mask, cfg.block, cfg.lo, cfg.hi)?;
    let batch = select_socl_pairs_chw(feat, &grid, cfg, seed)?;
    let (contrastive, dpos, dneg) = contrastive_with_grad(&batch)?;

    // Chain through the unit normalization: u = f/‖f‖ gives
    // df = (du − (du·u)u)/‖f‖, scattered back to the block coordinates.
    let c = feat.dim().0;
    for (vec, du) in batch
        .positives
        .iter()
        .zip(&dpos)
        .chain(batch.negatives.iter().zip(&dneg))
    {
        let proj = du.dot(&vec.v);
        for ch in 0..c {
            dfeat[[ch, vec.y, vec.x]] +=
                cfg.lambda * (du[ch] - proj * vec.v[ch]) / vec.norm;
        }
    }

    Ok((
        SegLossParts {
            total: ce + cfg.lambda * contrastive,
            ce,
            contrastive,
            contrastive_empty: batch.empty,
        },
        dlogits,
        dfeat,
    ))
}

/// Spec-shaped scalar API: `(H, W, 2)` logits and an `(H/b, W/b, C)`
/// feature map.
pub fn segmentation_loss(
    logits: &Array3<f64>,
    mask: &Mask,
    f: &FeatureMap,
    cfg: &SegLossConfig,
    seed: u64,
) -> Result<f64> {
    let logits_chw: Array3<f64> = logits.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
    let feat_chw: Array3<f64> = f.values.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
    let (parts, _, _) =
        segmentation_loss_with_grad(&logits_chw.view(), mask, &feat_chw.view(), cfg, seed)?;
    Ok(parts.total)
}

/// Batched combined loss: per-sample losses averaged, gradients stacked.
/// `masks` must match the batch axis of `logits` `(N, 2, H, W)` and `feats`
/// `(N, C, H/b, W/b)`.  Pair sampling derives an independent seed per
/// sample index so worker scheduling cannot change the draw.
pub fn segmentation_loss_batch(
    logits: &Array4<f64>,
    masks: &[&Mask],
    feats: &Array4<f64>,
    cfg: &SegLossConfig,
    seed: u64,
) -> Result<(SegLossParts, Array4<f64>, Array4<f64>)> {
    let n = logits.dim().0;
    if masks.len() != n || feats.dim().0 != n || n == 0 {
        return Err(IcssnError::invalid(
            "segmentation_loss",
            format!(
                "batch axes disagree: {n} logits, {} masks, {} features",
                masks.len(),
                feats.dim().0
            ),
        ));
    }
    let mut dlogits = Array4::zeros(logits.dim());
    let mut dfeats = Array4::zeros(feats.dim());
    let mut acc = SegLossParts {
        total: 0.0,
        ce: 0.0,
        contrastive: 0.0,
        contrastive_empty: false,
    };
    for i in 0..n {
        let li = logits.index_axis(ndarray::Axis(0), i);
        let fi = feats.index_axis(ndarray::Axis(0), i);
        let sample_seed = crate::seed::mix_seed(seed, i as u64);
        let (parts, dl, df) = segmentation_loss_with_grad(&li, masks[i], &fi, cfg, sample_seed)?;
        acc.total += parts.total / n as f64;
        acc.ce += parts.ce / n as f64;
        acc.contrastive += parts.contrastive / n as f64;
        acc.contrastive_empty |= parts.contrastive_empty;
        dlogits
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&(&dl / n as f64));
        dfeats
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&(&df / n as f64));
    }
    if !acc.total.is_finite() {
        return Err(IcssnError::invalid(
            "segmentation_loss",
            format!("non-finite loss {}", acc.total),
        ));
    }
    Ok((acc, dlogits, dfeats))
}

#[cfg(test)]
mod tests {
    use super::super::socl::{SoclPairBatch, SoclVector};
    use super::super::{SamplingStrategy, SegLossConfig};
    use super::*;
    use crate::seed::rng_for;
    use ndarray::{Array1 as A1, Array2};
    use rand::Rng;

    fn unit(values: &[f64]) -> A1<f64> {
        let v = A1::from_vec(values.to_vec());
        let norm = v.dot(&v).sqrt();
        v / norm
    }

    fn vector(y: usize, x: usize, v: A1<f64>) -> SoclVector {
        SoclVector { y, x, v, norm: 1.0 }
    }

    fn batch(pos: Vec<SoclVector>, neg: Vec<SoclVector>, tau: f64) -> SoclPairBatch {
        let empty = pos.is_empty();
        SoclPairBatch {
            positives: pos,
            negatives: neg,
            tau,
            empty,
        }
    }

    #[test]
    fn identical_pair_without_negatives_costs_nothing() {
        let v = unit(&[1.0, 0.0]);
        let b = batch(vec![vector(0, 0, v.clone()), vector(0, 1, v)], vec![], 1.0);
        assert_eq!(supervised_contrastive_loss(&b).unwrap(), 0.0);
    }

    #[test]
    fn opposed_negative_hand_value() {
        let v = unit(&[1.0, 0.0]);
        let b = batch(
            vec![vector(0, 0, v.clone()), vector(0, 1, v.clone())],
            vec![vector(1, 0, -&v)],
            1.0,
        );
        let loss = supervised_contrastive_loss(&b).unwrap();
        let want = (1.0 + (-2.0f64).exp()).ln(); // ≈ 0.126928
        assert!((loss - want).abs() < 1e-9, "got {loss}, want {want}");
    }

    #[test]
    fn empty_batch_returns_zero_with_flag() {
        let b = batch(vec![], vec![vector(0, 0, unit(&[1.0, 1.0]))], 0.5);
        assert!(b.empty);
        assert_eq!(supervised_contrastive_loss(&b).unwrap(), 0.0);
    }

    #[test]
    fn non_unit_vectors_are_a_contract_violation() {
        let mut v = unit(&[1.0, 2.0]);
        v[0] += 0.01;
        let b = batch(
            vec![vector(0, 0, v), vector(0, 1, unit(&[0.5, 0.5]))],
            vec![],
            1.0,
        );
        assert!(supervised_contrastive_loss(&b).is_err());
    }

    /// Literal transcription of the objective: mean over anchors, inner
    /// mean over that anchor's positives, fraction written out directly.
    fn brute_force(b: &SoclPairBatch) -> f64 {
        let pos = &b.positives;
        let mut anchor_sum = 0.0;
        for (a, anchor) in pos.iter().enumerate() {
            let mut inner = 0.0;
            let mut count = 0.0;
            for (p, positive) in pos.iter().enumerate() {
                if p == a {
                    continue;
                }
                let sp = (anchor.v.dot(&positive.v) / b.tau).exp();
                let sn: f64 = b
                    .negatives
                    .iter()
                    .map(|n| (anchor.v.dot(&n.v) / b.tau).exp())
                    .sum();
                inner += -(sp / (sp + sn)).ln();
                count += 1.0;
            }
            anchor_sum += inner / count;
        }
        anchor_sum / pos.len() as f64
    }

    #[test]
    fn random_batches_match_brute_force() {
        let mut rng = rng_for(61, "loss/brute", &[]);
        for trial in 0..100 {
            let np = rng.random_range(2..=8usize);
            let nn = rng.random_range(0..=4usize);
            let dim = 16;
            let make = |rng: &mut rand_chacha::ChaCha8Rng, y: usize| {
                let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                vector(y, 0, unit(&raw))
            };
            let pos: Vec<_> = (0..np).map(|k| make(&mut rng, k)).collect();
            let neg: Vec<_> = (0..nn).map(|k| make(&mut rng, 100 + k)).collect();
            let b = batch(pos, neg, rng.random_range(0.05..2.0));
            let got = supervised_contrastive_loss(&b).unwrap();
            let want = brute_force(&b);
            let rel = (got - want).abs() / want.abs().max(1e-9);
            assert!(rel < 1e-6, "trial {trial}: got {got}, want {want}");
        }
    }

    #[test]
    fn permutation_invariance_and_negative_monotonicity() {
        let mut rng = rng_for(62, "loss/mono", &[]);
        let make = |rng: &mut rand_chacha::ChaCha8Rng| {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            unit(&raw)
        };
        let pos: Vec<_> = (0..4).map(|k| vector(k, 0, make(&mut rng))).collect();
        let neg: Vec<_> = (0..3).map(|k| vector(9, k, make(&mut rng))).collect();
        let base = supervised_contrastive_loss(&batch(pos.clone(), neg.clone(), 0.3)).unwrap();

        let mut pos_perm = pos.clone();
        pos_perm.swap(0, 3);
        let mut neg_perm = neg.clone();
        neg_perm.reverse();
        let permuted = supervised_contrastive_loss(&batch(pos_perm, neg_perm, 0.3)).unwrap();
        assert!((base - permuted).abs() < 1e-12);

        // Pull one negative further from every anchor: the loss must drop.
        let mut anchor_mean = A1::<f64>::zeros(8);
        for p in &pos {
            anchor_mean = &anchor_mean + &p.v;
        }
        let away = unit(&(-&anchor_mean).to_vec());
        let mut neg_far = neg.clone();
        neg_far[0] = vector(9, 0, away);
        let before: f64 = pos.iter().map(|p| p.v.dot(&neg[0].v)).sum();
        let after: f64 = pos.iter().map(|p| p.v.dot(&neg_far[0].v)).sum();
        assert!(after < before, "construction must reduce similarity");
        let farther = supervised_contrastive_loss(&batch(pos, neg_far, 0.3)).unwrap();
        assert!(farther < base);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        use crate::nn::{central_diff, max_rel_error};
        let mut rng = rng_for(63, "loss/fdgrad", &[]);
        // FD over the *raw* vectors of a batch rebuilt with normalization
        // inside the objective, exercising the full chain used in training.
        let np = 3;
        let nn = 2;
        let dim = 4;
        let raw = ndarray::Array2::from_shape_fn((np + nn, dim), |_| rng.random_range(-1.0..1.0));

        let build = |raw: &ndarray::Array2<f64>| -> SoclPairBatch {
            let mk = |k: usize| {
                let row = raw.row(k).to_owned();
                let norm = row.dot(&row).sqrt();
                SoclVector {
                    y: k,
                    x: 0,
                    v: row / norm,
                    norm,
                }
            };
            batch((0..np).map(mk).collect(), (np..np + nn).map(mk).collect(), 0.4)
        };

        let b = build(&raw);
        let (_, dpos, dneg) = contrastive_with_grad(&b).unwrap();
        // Chain through normalization by hand.
        let mut analytic = ndarray::Array2::zeros((np + nn, dim));
        for (k, du) in dpos.iter().chain(dneg.iter()).enumerate() {
            let vecs = if k < np { &b.positives[k] } else { &b.negatives[k - np] };
            let proj = du.dot(&vecs.v);
            for d in 0..dim {
                analytic[[k, d]] = (du[d] - proj * vecs.v[d]) / vecs.norm;
            }
        }
        let fd = central_diff(&raw.clone().into_dyn(), 1e-6, |r| {
            let r2 = r.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
            supervised_contrastive_loss(&build(&r2)).unwrap()
        });
        assert!(max_rel_error(&analytic.into_dyn(), &fd) < 1e-5);
    }

    #[test]
    fn pixel_ce_closed_forms() {
        // Perfect confident prediction → 0 (clamped logs of ~1).
        let mut labels = Array2::zeros((4, 4));
        labels.slice_mut(ndarray::s![..2, ..]).fill(1u8);
        let mask = Mask::new(labels).unwrap();
        let mut logits = Array3::zeros((2, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                let big = if mask.labels[[y, x]] == 1 { 100.0 } else { -100.0 };
                logits[[1, y, x]] = big;
            }
        }
        let (loss, _) = pixel_ce_with_grad(&logits.view(), &mask).unwrap();
        assert!(loss.abs() < 1e-10);

        // Uniform prediction → log 2.
        let logits = Array3::zeros((2, 4, 4));
        let (loss, _) = pixel_ce_with_grad(&logits.view(), &mask).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);

        // Spec-shaped wrapper agrees.
        let hw2 = Array3::zeros((4, 4, 2));
        let loss2 = pixel_cross_entropy(&hw2, &mask).unwrap();
        assert!((loss2 - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pixel_ce_shape_mismatch_is_rejected() {
        let mask = Mask::new(Array2::zeros((4, 4))).unwrap();
        let logits = Array3::zeros((2, 4, 6));
        assert!(pixel_ce_with_grad(&logits.view(), &mask).is_err());
    }

    #[test]
    fn pixel_ce_gradient_matches_finite_differences() {
        use crate::nn::{central_diff, max_rel_error};
        let mut rng = rng_for(64, "loss/cefd", &[]);
        let labels = Array2::from_shape_fn((4, 4), |_| u8::from(rng.random_bool(0.5)));
        let mask = Mask::new(labels).unwrap();
        let logits = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(-2.0..2.0));
        let (_, grad) = pixel_ce_with_grad(&logits.view(), &mask).unwrap();
        let fd = central_diff(&logits.clone().into_dyn(), 1e-6, |l| {
            let l3 = l.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            pixel_ce_with_grad(&l3, &mask).unwrap().0
        });
        assert!(max_rel_error(&grad.into_dyn(), &fd) < 1e-4);
    }

    fn tiny_cfg() -> SegLossConfig {
        SegLossConfig {
            lambda: 1.0,
            tau: 0.4,
            n_pos: 8,
            n_neg: 8,
            strategy: SamplingStrategy::Edge,
            block: 2,
            lo: 1,
            hi: 3,
        }
    }

    fn tiny_instance() -> (Array3<f64>, Mask, Array3<f64>) {
        let mut rng = rng_for(65, "loss/tiny", &[]);
        let logits = Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(-1.0..1.0));
        // Blocks of every flavour: interior (4), boundary (1–3), empty (0).
        let mut labels = Array2::zeros((8, 8));
        labels.slice_mut(ndarray::s![0..4, 0..4]).fill(1u8); // four I blocks
        labels[[0, 5]] = 1; // one P block (count 1)
        labels[[4, 1]] = 1;
        labels[[5, 0]] = 1; // P block count 2
        let mask = Mask::new(labels).unwrap();
        let feat = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0.3..1.0));
        (logits, mask, feat)
    }

    #[test]
    fn lambda_zero_reduces_to_cross_entropy() {
        let (logits, mask, feat) = tiny_instance();
        let cfg = SegLossConfig {
            lambda: 0.0,
            ..tiny_cfg()
        };
        let (parts, _, dfeat) =
            segmentation_loss_with_grad(&logits.view(), &mask, &feat.view(), &cfg, 3).unwrap();
        let (ce, _) = pixel_ce_with_grad(&logits.view(), &mask).unwrap();
        assert_eq!(parts.total, ce);
        assert!(dfeat.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn no_positive_blocks_reduces_to_cross_entropy() {
        let (logits, _, feat) = tiny_instance();
        let mask = Mask::new(Array2::zeros((8, 8))).unwrap();
        let (parts, _, dfeat) =
            segmentation_loss_with_grad(&logits.view(), &mask, &feat.view(), &tiny_cfg(), 3)
                .unwrap();
        assert!(parts.contrastive_empty);
        assert_eq!(parts.total, parts.ce);
        assert!(dfeat.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn combined_loss_composes_the_two_oracles() {
        let (logits, mask, feat) = tiny_instance();
        let cfg = tiny_cfg();
        let (parts, _, _) =
            segmentation_loss_with_grad(&logits.view(), &mask, &feat.view(), &cfg, 7).unwrap();
        let (ce, _) = pixel_ce_with_grad(&logits.view(), &mask).unwrap();
        let grid = derive_socl_labels(&mask, 2, 1, 3).unwrap();
        let b = select_socl_pairs_chw(&feat.view(), &grid, &cfg, 7).unwrap();
        let want = ce + cfg.lambda * brute_force(&b);
        let rel = (parts.total - want).abs() / want.abs().max(1e-9);
        assert!(rel < 1e-6, "got {}, want {want}", parts.total);
    }

    #[test]
    fn full_gradient_passes_finite_differences_on_the_tiny_instance() {
        use crate::nn::{central_diff, max_rel_error};
        let (logits, mask, feat) = tiny_instance();
        let cfg = tiny_cfg();
        let (_, dlogits, dfeat) =
            segmentation_loss_with_grad(&logits.view(), &mask, &feat.view(), &cfg, 11).unwrap();

        let fd_logits = central_diff(&logits.clone().into_dyn(), 1e-6, |l| {
            let l3 = l.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            segmentation_loss_with_grad(&l3, &mask, &feat.view(), &cfg, 11)
                .unwrap()
                .0
                .total
        });
        assert!(max_rel_error(&dlogits.into_dyn(), &fd_logits) < 1e-3);

        let fd_feat = central_diff(&feat.clone().into_dyn(), 1e-6, |f| {
            let f3 = f.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            segmentation_loss_with_grad(&logits.view(), &mask, &f3, &cfg, 11)
                .unwrap()
                .0
                .total
        });
        assert!(max_rel_error(&dfeat.into_dyn(), &fd_feat) < 1e-3);
    }

    #[test]
    fn batched_loss_averages_per_sample_values() {
        let (logits, mask, feat) = tiny_instance();
        let mut l4 = Array4::zeros((2, 2, 8, 8));
        let mut f4 = Array4::zeros((2, 4, 4, 4));
        for i in 0..2 {
            l4.index_axis_mut(ndarray::Axis(0), i).assign(&logits);
            f4.index_axis_mut(ndarray::Axis(0), i).assign(&feat);
        }
        let cfg = tiny_cfg();
        let (parts, dl, df) =
            segmentation_loss_batch(&l4, &[&mask, &mask], &f4, &cfg, 5).unwrap();
        // Same sample twice with different per-sample seeds: CE identical;
        // totals are the mean of the two finite values.
        let (ce, _) = pixel_ce_with_grad(&logits.view(), &mask).unwrap();
        assert!((parts.ce - ce).abs() < 1e-12);
        assert!(parts.total.is_finite());
        assert_eq!(dl.dim(), (2, 2, 8, 8));
        assert_eq!(df.dim(), (2, 4, 4, 4));
    }
}

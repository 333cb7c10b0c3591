//! Alternating two-branch training with encoder transfer.
//!
//! Each round trains the classification branch to convergence, hands its
//! encoder to the segmentation branch, warms the segmentation head up over
//! the frozen encoder, joint-trains segmentation, hands the encoder back,
//! and warms the classification head up — then the next round begins.
//! Rounds stop when neither branch's best validation loss improved, or at
//! `max_rounds`.  Every phase is checkpointed, so interrupted runs resume at
//! the last completed phase bit-exactly.

mod checkpoint;
mod config;
mod sgd;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{DataSection, RunConfig, SegmentationSection, SoclSection};
pub use sgd::{cosine_lr, Sgd};

use crate::classifier::{batch_pairs, classification_loss, form_pairs, Classifier};
use crate::data::{batch_tiles, LoadedDataset, Mask, Sample, Split};
use crate::encoder::Encoder;
use crate::metrics::{dataset_confusion, pixel_metrics};
use crate::nn::{Mode, Params};
use crate::seed::{derive_seed, rng_for};
use crate::segmenter::{segmentation_loss_batch, Segmenter};
use crate::{IcssnError, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Derives an independent `u64` sub-seed for one purpose within a run.
fn sub_seed(seed: u64, purpose: &str, indices: &[u64]) -> u64 {
    let bytes = derive_seed(seed, purpose, indices);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}

/// `[training]`: optimizer, schedule, epoch budgets, and stopping rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Only `"sgd"` (momentum SGD) is implemented.
    pub optimizer: String,
    pub momentum: f64,
    pub lr_classification: f64,
    pub lr_segmentation: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Parallel data readers a host may use; the reference implementation
    /// loads sequentially (results are seed-determined either way).
    pub workers: usize,
    /// Only `"cosine"` (cosine annealing to zero over the epoch cap).
    pub schedule: String,
    pub epochs_classification: usize,
    pub epochs_segmentation: usize,
    pub max_rounds: usize,
    /// Epochs without validation improvement before a phase stops early.
    pub patience: usize,
    /// Smallest validation-loss drop that counts as an improvement.
    pub min_delta: f64,
    /// Epoch cap for the frozen-encoder warm-up phases.
    pub warmup_epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: "sgd".into(),
            momentum: 0.9,
            lr_classification: 0.001,
            lr_segmentation: 0.007,
            weight_decay: 0.0005,
            batch_size: 4,
            workers: 4,
            schedule: "cosine".into(),
            epochs_classification: 50,
            epochs_segmentation: 100,
            max_rounds: 3,
            patience: 8,
            min_delta: 1e-4,
            warmup_epochs: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer != "sgd" {
            return Err(IcssnError::Config(format!(
                "optimizer `{}` is not supported (only \"sgd\")",
                self.optimizer
            )));
        }
        if self.schedule != "cosine" {
            return Err(IcssnError::Config(format!(
                "schedule `{}` is not supported (only \"cosine\")",
                self.schedule
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(IcssnError::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.lr_classification <= 0.0 || self.lr_segmentation <= 0.0 {
            return Err(IcssnError::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(IcssnError::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(IcssnError::Config(
                "batch_size and workers must be at least 1".into(),
            ));
        }
        if self.epochs_classification == 0
            || self.epochs_segmentation == 0
            || self.warmup_epochs == 0
        {
            return Err(IcssnError::Config("epoch caps must be at least 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(IcssnError::Config("max_rounds must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(IcssnError::Config("patience must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(IcssnError::Config("min_delta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Early stopping on validation loss: a phase converged once `patience`
/// consecutive epochs fail to improve the best loss by more than
/// `min_delta`.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceCriterion {
    pub patience: usize,
    pub min_delta: f64,
}

impl ConvergenceCriterion {
    pub fn new(patience: usize, min_delta: f64) -> Result<Self> {
        if patience == 0 {
            return Err(IcssnError::Config("patience must be at least 1".into()));
        }
        Ok(ConvergenceCriterion { patience, min_delta })
    }

    pub fn tracker(self) -> ConvergenceTracker {
        ConvergenceTracker {
            criterion: self,
            best: f64::INFINITY,
            stale_epochs: 0,
        }
    }
}

/// Mutable state of one phase's stopping rule.
#[derive(Debug, Clone)]
pub struct ConvergenceTracker {
    criterion: ConvergenceCriterion,
    best: f64,
    stale_epochs: usize,
}

impl ConvergenceTracker {
    /// Feeds one epoch's validation loss; returns whether it improved on
    /// the best seen so far (the first observation always does).
    pub fn observe(&mut self, val_loss: f64) -> bool {
        let improved = self.best.is_infinite() || val_loss < self.best - self.criterion.min_delta;
        if improved {
            self.best = val_loss;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.stale_epochs >= self.criterion.patience
    }
}

/// The two alternating branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Classification,
    Segmentation,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Classification => "classification",
            Branch::Segmentation => "segmentation",
        }
    }
}

/// The model trio shared by a run.  Both branches reference the same
/// [`Encoder`] value; what separates them is which parameter store a call
/// reads, so transferring the encoder is a prefix copy between stores.
pub struct Models {
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub segmenter: Segmenter,
}

impl Models {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let channels = cfg.encoder.output_channels;
        let classifier = Classifier::new(cfg.classifier.clone(), channels)?;
        let segmenter = Segmenter::new(channels, cfg.segmenter_config())?;
        Ok(Models {
            encoder,
            classifier,
            segmenter,
        })
    }

    /// Freshly initialised parameter store for one branch: the shared
    /// encoder namespace plus that branch's head.
    pub fn init_params(&self, branch: Branch, seed: u64) -> Params {
        let mut params = Params::new();
        let mut rng = rng_for(seed, "init", &[match branch {
            Branch::Classification => 0,
            Branch::Segmentation => 1,
        }]);
        self.encoder.declare(&mut params, &mut rng);
        match branch {
            Branch::Classification => self.classifier.declare(&mut params, &mut rng),
            Branch::Segmentation => self.segmenter.declare(&mut params, &mut rng),
        }
        params
    }
}

/// One epoch's summary inside a phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of training one branch for one phase.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-validation weights and their provenance.
    pub checkpoint: Checkpoint,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub val_metrics: BTreeMap<String, f64>,
    pub history: Vec<EpochRecord>,
}

/// Copies the encoder namespace from one branch store into the other.
/// Fails (naming the divergent tensors) unless the namespaces are
/// structurally identical; head namespaces are untouched.
pub fn transfer_encoder(src: &Params, dst: &mut Params) -> Result<()> {
    for name in src.names_with_prefix("encoder/") {
        if dst.contains(&name) && dst.get(&name).shape() != src.get(&name).shape() {
            return Err(IcssnError::invalid(
                "transfer_encoder",
                format!("`{name}` has different shapes in the two stores"),
            ));
        }
    }
    dst.copy_prefix_from(src, "encoder/")
}

fn non_finite(branch: Branch, phase: &str, epoch: usize, what: &str) -> IcssnError {
    IcssnError::NonFinite {
        phase: format!("{} {phase}", branch.as_str()),
        epoch,
        details: format!("{what} became non-finite"),
    }
}

/// One classification training epoch; returns the pair-weighted mean loss.
fn classification_epoch(
    models: &Models,
    params: &mut Params,
    opt: &mut Sgd,
    train_samples: &[Sample],
    batch_size: usize,
    freeze_encoder: bool,
    epoch_seed: u64,
) -> Result<f64> {
    let pairs = form_pairs(train_samples, epoch_seed);
    let mode = if freeze_encoder { Mode::Eval } else { Mode::Train };
    let frozen: &[&str] = if freeze_encoder { &["encoder/"] } else { &[] };
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in pairs.chunks(batch_size) {
        let (a, b, labels) = batch_pairs(chunk)?;
        let (probs, cache) = models
            .classifier
            .forward_batch(&models.encoder, params, &a, &b, mode)?;
        let loss = classification_loss(&probs, &labels)?;
        if !loss.is_finite() {
            // Bail before the optimizer step so the weights stay untouched
            // for the diagnostic checkpoint the caller writes.
            return Ok(loss);
        }
        params.zero_grads();
        models
            .classifier
            .backward_batch(&models.encoder, params, &cache, &labels, !freeze_encoder)?;
        opt.step(params, frozen);
        total += loss * labels.len() as f64;
        count += labels.len();
    }
    Ok(total / count as f64)
}

/// One segmentation training epoch; returns the sample-weighted mean loss.
#[allow(clippy::too_many_arguments)]
fn segmentation_epoch(
    models: &Models,
    params: &mut Params,
    opt: &mut Sgd,
    train_samples: &[Sample],
    cfg: &RunConfig,
    freeze_encoder: bool,
    epoch: usize,
    phase_seed: u64,
) -> Result<f64> {
    let seg_cfg = cfg.seg_loss_config();
    let batch_size = cfg.training.batch_size;
    let enc_mode = if freeze_encoder { Mode::Eval } else { Mode::Train };
    let frozen: &[&str] = if freeze_encoder { &["encoder/"] } else { &[] };

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    order.shuffle(&mut rng_for(phase_seed, "epoch-order", &[epoch as u64]));
    let mut dropout_rng = rng_for(phase_seed, "epoch-dropout", &[epoch as u64]);

    let mut total = 0.0;
    let mut count = 0usize;
    for (bi, chunk) in order.chunks(batch_size).enumerate() {
        let tiles: Vec<_> = chunk.iter().map(|&i| &train_samples[i].tile).collect();
        let masks: Vec<&Mask> = chunk.iter().map(|&i| &train_samples[i].mask).collect();
        let x = batch_tiles(&tiles)?;
        let (logits, cache) = models.segmenter.forward_split(
            &models.encoder,
            params,
            &x,
            enc_mode,
            Mode::Train,
            &mut dropout_rng,
        )?;
        let socl_seed = sub_seed(phase_seed, "socl", &[epoch as u64, bi as u64]);
        let (parts, dlogits, dfeats) =
            segmentation_loss_batch(&logits, &masks, &cache.feats, &seg_cfg, socl_seed)?;
        if !parts.total.is_finite() {
            // Bail before the optimizer step so the weights stay untouched
            // for the diagnostic checkpoint the caller writes.
            return Ok(parts.total);
        }
        params.zero_grads();
        models.segmenter.backward(
            &models.encoder,
            params,
            &cache,
            &dlogits,
            Some(&dfeats),
            !freeze_encoder,
        );
        opt.step(params, frozen);
        total += parts.total * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Pair-level validation of the classification branch: mean loss plus
/// 4-way pair accuracy.  Pair formation is seed-fixed, so successive epochs
/// see the same validation pairs.
pub fn evaluate_classification(
    models: &Models,
    params: &mut Params,
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
) -> Result<(f64, BTreeMap<String, f64>)> {
    if samples.is_empty() {
        return Err(IcssnError::invalid(
            "evaluate_classification",
            "no samples to evaluate",
        ));
    }
    let pairs = form_pairs(samples, sub_seed(seed, "eval-pairs", &[]));
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for chunk in pairs.chunks(batch_size) {
        let (a, b, labels) = batch_pairs(chunk)?;
        let (probs, _) = models
            .classifier
            .forward_batch(&models.encoder, params, &a, &b, Mode::Eval)?;
        total += classification_loss(&probs, &labels)? * labels.len() as f64;
        for (i, label) in labels.iter().enumerate() {
            let row = probs.row(i);
            let argmax = (0..4).max_by(|&p, &q| row[p].total_cmp(&row[q])).unwrap();
            correct += usize::from(argmax == label.index());
        }
        count += labels.len();
    }
    let loss = total / count as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("val_loss".into(), loss);
    metrics.insert("pair_accuracy".into(), correct as f64 / count as f64);
    Ok((loss, metrics))
}

/// Validation of the segmentation branch: mean combined loss plus the pixel
/// metric suite over the whole sample set.  SOCL sampling is seed-fixed per
/// batch index, so successive epochs see identical validation losses for
/// identical weights.
pub fn evaluate_segmentation(
    models: &Models,
    params: &mut Params,
    samples: &[Sample],
    cfg: &RunConfig,
    seed: u64,
) -> Result<(f64, BTreeMap<String, f64>)> {
    if samples.is_empty() {
        return Err(IcssnError::invalid(
            "evaluate_segmentation",
            "no samples to evaluate",
        ));
    }
    let seg_cfg = cfg.seg_loss_config();
    let batch_size = cfg.training.batch_size;
    let mut total = 0.0;
    let mut ce = 0.0;
    let mut contrastive = 0.0;
    let mut count = 0usize;
    let mut preds: Vec<Mask> = Vec::with_capacity(samples.len());
    let mut truths: Vec<Mask> = Vec::with_capacity(samples.len());
    let mut rng = rng_for(seed, "eval-dropout", &[]);
    for (bi, chunk) in samples.chunks(batch_size).enumerate() {
        let tiles: Vec<_> = chunk.iter().map(|s| &s.tile).collect();
        let masks: Vec<&Mask> = chunk.iter().map(|s| &s.mask).collect();
        let x = batch_tiles(&tiles)?;
        let (logits, cache) =
            models
                .segmenter
                .forward(&models.encoder, params, &x, Mode::Eval, &mut rng)?;
        let (parts, _, _) = segmentation_loss_batch(
            &logits,
            &masks,
            &cache.feats,
            &seg_cfg,
            sub_seed(seed, "eval-socl", &[bi as u64]),
        )?;
        total += parts.total * chunk.len() as f64;
        ce += parts.ce * chunk.len() as f64;
        contrastive += parts.contrastive * chunk.len() as f64;
        count += chunk.len();
        let (_, _, h, w) = logits.dim();
        for (i, sample) in chunk.iter().enumerate() {
            let labels = Array2::from_shape_fn((h, w), |(y, xx)| {
                u8::from(logits[[i, 1, y, xx]] > logits[[i, 0, y, xx]])
            });
            preds.push(Mask::new(labels)?);
            truths.push(sample.mask.clone());
        }
    }
    let loss = total / count as f64;
    let pm = pixel_metrics(&dataset_confusion(&preds, &truths)?)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("val_loss".into(), loss);
    metrics.insert("val_ce".into(), ce / count as f64);
    metrics.insert("val_contrastive".into(), contrastive / count as f64);
    metrics.insert("pa".into(), pm.pa);
    metrics.insert("precision".into(), pm.precision);
    metrics.insert("recall".into(), pm.recall);
    metrics.insert("landslide_iou".into(), pm.landslide_iou);
    metrics.insert("slope_iou".into(), pm.slope_iou);
    metrics.insert("miou".into(), pm.miou);
    metrics.insert("f1".into(), pm.f1);
    Ok((loss, metrics))
}

/// Batched eval-mode mask prediction for a list of samples.
pub fn predict_masks(
    models: &Models,
    params: &mut Params,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Mask>> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut rng = rng_for(0, "predict-dropout", &[]);
    for chunk in samples.chunks(batch_size.max(1)) {
        let tiles: Vec<_> = chunk.iter().map(|s| &s.tile).collect();
        let x = batch_tiles(&tiles)?;
        let (logits, _) =
            models
                .segmenter
                .forward(&models.encoder, params, &x, Mode::Eval, &mut rng)?;
        let (_, _, h, w) = logits.dim();
        for i in 0..chunk.len() {
            let labels = Array2::from_shape_fn((h, w), |(y, xx)| {
                u8::from(logits[[i, 1, y, xx]] > logits[[i, 0, y, xx]])
            });
            preds.push(Mask::new(labels)?);
        }
    }
    Ok(preds)
}

/// Trains one branch until its convergence criterion fires or `epoch_cap`
/// is hit, and restores the best-validation weights into `params`.
///
/// With `freeze_encoder` the encoder namespace is bit-identical before and
/// after: gradients stop at the feature map, the optimizer skips the
/// prefix, and the encoder runs in eval mode so batch-norm statistics stay
/// put.  A non-finite train or validation loss aborts with a diagnostic
/// checkpoint (when `diagnostics_dir` is given) carrying the offending
/// weights.
#[allow(clippy::too_many_arguments)]
pub fn train_branch(
    models: &Models,
    params: &mut Params,
    branch: Branch,
    data: &LoadedDataset,
    cfg: &RunConfig,
    freeze_encoder: bool,
    epoch_cap: usize,
    seed: u64,
    round: usize,
    diagnostics_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if epoch_cap == 0 {
        return Err(IcssnError::Config("epoch_cap must be at least 1".into()));
    }
    let train_samples: Vec<Sample> = data.split(Split::Train).into_iter().cloned().collect();
    let val_samples: Vec<Sample> = data.split(Split::Val).into_iter().cloned().collect();
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(IcssnError::invalid(
            "train_branch",
            "train and validation splits must be nonempty",
        ));
    }
    let tcfg = &cfg.training;
    let phase = if freeze_encoder { "warmup" } else { "joint" };
    let lr0 = match branch {
        Branch::Classification => tcfg.lr_classification,
        Branch::Segmentation => tcfg.lr_segmentation,
    };
    let mut opt = Sgd::new(lr0, tcfg.momentum, tcfg.weight_decay, epoch_cap);
    let mut tracker = ConvergenceCriterion::new(tcfg.patience, tcfg.min_delta)?.tracker();

    let encoder_hash_before = params.hash_prefix("encoder/");
    let mut history = Vec::new();
    let mut best_params: Option<Params> = None;
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_metrics = BTreeMap::new();
    let mut epochs_run = 0;

    for epoch in 0..epoch_cap {
        opt.set_epoch(epoch);
        let train_loss = match branch {
            Branch::Classification => classification_epoch(
                models,
                params,
                &mut opt,
                &train_samples,
                tcfg.batch_size,
                freeze_encoder,
                sub_seed(seed, "pairs", &[epoch as u64]),
            )?,
            Branch::Segmentation => segmentation_epoch(
                models,
                params,
                &mut opt,
                &train_samples,
                cfg,
                freeze_encoder,
                epoch,
                seed,
            )?,
        };
        let (val_loss, val_metrics) = match branch {
            Branch::Classification => evaluate_classification(
                models,
                params,
                &val_samples,
                tcfg.batch_size,
                sub_seed(seed, "val", &[]),
            )?,
            Branch::Segmentation => {
                evaluate_segmentation(models, params, &val_samples, cfg, sub_seed(seed, "val", &[]))?
            }
        };
        epochs_run = epoch + 1;

        if !train_loss.is_finite() || !val_loss.is_finite() {
            if let Some(dir) = diagnostics_dir {
                let _ = save_checkpoint(
                    &dir.join(format!("diagnostic_{}.ckpt", branch.as_str())),
                    &Checkpoint {
                        params: params.clone(),
                        meta: CheckpointMeta {
                            branch: branch.as_str().into(),
                            round,
                            phase: phase.into(),
                            epoch,
                            config_hash: cfg.config_hash(),
                            val_metrics: BTreeMap::new(),
                        },
                    },
                );
            }
            let what = if train_loss.is_finite() { "validation loss" } else { "train loss" };
            return Err(non_finite(branch, phase, epoch, what));
        }

        history.push(EpochRecord {
            epoch,
            lr: opt.lr(),
            train_loss,
            val_loss,
        });
        // Patience counts min_delta-sized improvements; the retained
        // weights update on any strict improvement.
        tracker.observe(val_loss);
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_params = Some(params.clone());
            best_metrics = val_metrics;
        }
        if tracker.should_stop() {
            break;
        }
    }

    if let Some(best) = best_params {
        *params = best;
    }
    if freeze_encoder {
        debug_assert_eq!(params.hash_prefix("encoder/"), encoder_hash_before);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: params.clone(),
            meta: CheckpointMeta {
                branch: branch.as_str().into(),
                round,
                phase: phase.into(),
                epoch: best_epoch,
                config_hash: cfg.config_hash(),
                val_metrics: best_metrics.clone(),
            },
        },
        epochs_run,
        best_epoch,
        best_val_loss,
        val_metrics: best_metrics,
        history,
    })
}

/// The six phases of one round, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    ClsJoint,
    TransferToSeg,
    SegWarmup,
    SegJoint,
    TransferToCls,
    ClsWarmup,
}

impl PhaseKind {
    pub const ORDER: [PhaseKind; 6] = [
        PhaseKind::ClsJoint,
        PhaseKind::TransferToSeg,
        PhaseKind::SegWarmup,
        PhaseKind::SegJoint,
        PhaseKind::TransferToCls,
        PhaseKind::ClsWarmup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::ClsJoint => "cls_joint",
            PhaseKind::TransferToSeg => "transfer_to_seg",
            PhaseKind::SegWarmup => "seg_warmup",
            PhaseKind::SegJoint => "seg_joint",
            PhaseKind::TransferToCls => "transfer_to_cls",
            PhaseKind::ClsWarmup => "cls_warmup",
        }
    }

    fn branch(self) -> Option<Branch> {
        match self {
            PhaseKind::ClsJoint | PhaseKind::ClsWarmup => Some(Branch::Classification),
            PhaseKind::SegWarmup | PhaseKind::SegJoint => Some(Branch::Segmentation),
            _ => None,
        }
    }
}

/// One completed phase in the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub round: usize,
    pub phase: String,
    pub branch: Option<String>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub val_metrics: BTreeMap<String, f64>,
    pub history: Vec<EpochRecord>,
}

/// Per-round best validation losses and the improvement verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub cls_best_val: f64,
    pub seg_best_val: f64,
    pub improved: bool,
}

/// The serialized record of a whole run (`rounds.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub seed: u64,
    pub config_hash: String,
    pub phases: Vec<PhaseOutcome>,
    pub rounds: Vec<RoundSummary>,
    pub stop_reason: Option<String>,
}

/// Final state of a (possibly paused) iterative run.
#[derive(Debug)]
pub struct IterativeOutcome {
    /// Best classification checkpoint seen across all rounds.
    pub classification: Checkpoint,
    /// Best segmentation checkpoint seen across all rounds.
    pub segmentation: Checkpoint,
    pub log: RoundLog,
    /// False when the run was paused by an internal phase limit.
    pub complete: bool,
}

const ROUNDS_FILE: &str = "rounds.json";

fn latest_name(branch: Branch) -> String {
    format!("latest_{}.ckpt", branch.as_str())
}

fn best_name(branch: Branch) -> String {
    format!("best_{}.ckpt", branch.as_str())
}

fn write_log(dir: &Path, log: &RoundLog) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(ROUNDS_FILE), serde_json::to_string_pretty(log)?)?;
    Ok(())
}

/// Best validation loss a branch reached in phases satisfying `pred`.
fn best_val_where(log: &RoundLog, branch: Branch, pred: impl Fn(&PhaseOutcome) -> bool) -> f64 {
    log.phases
        .iter()
        .filter(|p| p.branch.as_deref() == Some(branch.as_str()) && pred(p))
        .filter_map(|p| p.best_val_loss)
        .fold(f64::INFINITY, f64::min)
}

/// Runs Algorithm-style alternating training from scratch.
pub fn run_iterative_training(
    data: &LoadedDataset,
    cfg: &RunConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<IterativeOutcome> {
    run_iterative_inner(data, cfg, seed, out_dir, false, None)
}

/// Resumes an interrupted run from `out_dir`, skipping completed phases.
/// A finished run returns its stored outcome without training further.
pub fn resume_iterative_training(
    data: &LoadedDataset,
    cfg: &RunConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<IterativeOutcome> {
    run_iterative_inner(data, cfg, seed, Some(out_dir), true, None)
}

pub(crate) fn run_iterative_inner(
    data: &LoadedDataset,
    cfg: &RunConfig,
    seed: u64,
    out_dir: Option<&Path>,
    resume: bool,
    phase_limit: Option<usize>,
) -> Result<IterativeOutcome> {
    cfg.validate()?;
    let models = Models::from_config(cfg)?;
    let mut cls_params = models.init_params(Branch::Classification, seed);
    let mut seg_params = models.init_params(Branch::Segmentation, seed);
    let mut log = RoundLog {
        seed,
        config_hash: cfg.config_hash(),
        phases: Vec::new(),
        rounds: Vec::new(),
        stop_reason: None,
    };
    let mut best_cls: Option<Checkpoint> = None;
    let mut best_seg: Option<Checkpoint> = None;

    if resume {
        let dir = out_dir.ok_or_else(|| {
            IcssnError::invalid("run_iterative_training", "resume requires an output directory")
        })?;
        let log_path = dir.join(ROUNDS_FILE);
        if log_path.exists() {
            let stored: RoundLog = serde_json::from_str(&std::fs::read_to_string(&log_path)?)?;
            if stored.config_hash != log.config_hash {
                return Err(IcssnError::Config(format!(
                    "resume config hash {} does not match stored run {}",
                    log.config_hash, stored.config_hash
                )));
            }
            if stored.seed != seed {
                return Err(IcssnError::Config(format!(
                    "resume seed {seed} does not match stored run seed {}",
                    stored.seed
                )));
            }
            log = stored;
            if !log.phases.is_empty() {
                cls_params =
                    load_checkpoint(&dir.join(latest_name(Branch::Classification)))?.params;
                seg_params = load_checkpoint(&dir.join(latest_name(Branch::Segmentation)))?.params;
            }
            for (slot, branch) in [
                (&mut best_cls, Branch::Classification),
                (&mut best_seg, Branch::Segmentation),
            ] {
                let path = dir.join(best_name(branch));
                if path.exists() {
                    *slot = Some(load_checkpoint(&path)?);
                }
            }
        }
    }
    let completed = log.phases.len();

    let finish = |log: RoundLog,
                  best_cls: Option<Checkpoint>,
                  best_seg: Option<Checkpoint>,
                  cls_params: &Params,
                  seg_params: &Params,
                  complete: bool| {
        let fallback = |params: &Params, branch: Branch| Checkpoint {
            params: params.clone(),
            meta: CheckpointMeta {
                branch: branch.as_str().into(),
                round: 0,
                phase: "init".into(),
                epoch: 0,
                config_hash: cfg.config_hash(),
                val_metrics: BTreeMap::new(),
            },
        };
        IterativeOutcome {
            classification: best_cls
                .unwrap_or_else(|| fallback(cls_params, Branch::Classification)),
            segmentation: best_seg.unwrap_or_else(|| fallback(seg_params, Branch::Segmentation)),
            log,
            complete,
        }
    };

    if log.stop_reason.is_some() {
        // The stored run already finished; nothing left to train.
        return Ok(finish(log, best_cls, best_seg, &cls_params, &seg_params, true));
    }

    let min_delta = cfg.training.min_delta;
    let mut phase_idx = 0usize;
    'rounds: for round in 1..=cfg.training.max_rounds {
        // Global bests before this round, for the round-improvement rule.
        let prev_cls = best_val_where(&log, Branch::Classification, |p| p.round < round);
        let prev_seg = best_val_where(&log, Branch::Segmentation, |p| p.round < round);

        for kind in PhaseKind::ORDER {
            phase_idx += 1;
            if phase_idx <= completed {
                continue;
            }
            if let Some(limit) = phase_limit {
                if phase_idx > limit {
                    return Ok(finish(log, best_cls, best_seg, &cls_params, &seg_params, false));
                }
            }

            let phase_seed = sub_seed(seed, "phase", &[round as u64, phase_idx as u64]);
            let outcome = match kind {
                PhaseKind::TransferToSeg => {
                    transfer_encoder(&cls_params, &mut seg_params)?;
                    None
                }
                PhaseKind::TransferToCls => {
                    transfer_encoder(&seg_params, &mut cls_params)?;
                    None
                }
                trained => {
                    let branch = trained.branch().expect("training phases have a branch");
                    let (params, freeze, cap) = match trained {
                        PhaseKind::ClsJoint => (
                            &mut cls_params,
                            false,
                            cfg.training.epochs_classification,
                        ),
                        PhaseKind::SegWarmup => {
                            (&mut seg_params, true, cfg.training.warmup_epochs)
                        }
                        PhaseKind::SegJoint => {
                            (&mut seg_params, false, cfg.training.epochs_segmentation)
                        }
                        PhaseKind::ClsWarmup => {
                            (&mut cls_params, true, cfg.training.warmup_epochs)
                        }
                        _ => unreachable!(),
                    };
                    Some((
                        branch,
                        train_branch(
                            &models, params, branch, data, cfg, freeze, cap, phase_seed, round,
                            out_dir,
                        )?,
                    ))
                }
            };

            let record = match &outcome {
                None => PhaseOutcome {
                    round,
                    phase: kind.name().into(),
                    branch: None,
                    epochs_run: 0,
                    best_epoch: 0,
                    best_val_loss: None,
                    val_metrics: BTreeMap::new(),
                    history: Vec::new(),
                },
                Some((branch, out)) => PhaseOutcome {
                    round,
                    phase: kind.name().into(),
                    branch: Some(branch.as_str().into()),
                    epochs_run: out.epochs_run,
                    best_epoch: out.best_epoch,
                    best_val_loss: Some(out.best_val_loss),
                    val_metrics: out.val_metrics.clone(),
                    history: out.history.clone(),
                },
            };
            log.phases.push(record);

            // Track the global best checkpoint per branch.
            if let Some((branch, out)) = outcome {
                let slot = match branch {
                    Branch::Classification => &mut best_cls,
                    Branch::Segmentation => &mut best_seg,
                };
                let current = slot
                    .as_ref()
                    .and_then(|c| c.meta.val_metrics.get("val_loss").copied())
                    .unwrap_or(f64::INFINITY);
                if out.best_val_loss < current {
                    *slot = Some(out.checkpoint.clone());
                    if let Some(dir) = out_dir {
                        save_checkpoint(&dir.join(best_name(branch)), &out.checkpoint)?;
                    }
                }
            }

            if let Some(dir) = out_dir {
                let meta_for = |branch: Branch, params: &Params| Checkpoint {
                    params: params.clone(),
                    meta: CheckpointMeta {
                        branch: branch.as_str().into(),
                        round,
                        phase: kind.name().into(),
                        epoch: 0,
                        config_hash: cfg.config_hash(),
                        val_metrics: BTreeMap::new(),
                    },
                };
                save_checkpoint(
                    &dir.join(latest_name(Branch::Classification)),
                    &meta_for(Branch::Classification, &cls_params),
                )?;
                save_checkpoint(
                    &dir.join(latest_name(Branch::Segmentation)),
                    &meta_for(Branch::Segmentation, &seg_params),
                )?;
                write_log(dir, &log)?;
            }
        }

        if !log.rounds.iter().any(|r| r.round == round) {
            let cls_round = best_val_where(&log, Branch::Classification, |p| p.round == round);
            let seg_round = best_val_where(&log, Branch::Segmentation, |p| p.round == round);
            let improved =
                cls_round < prev_cls - min_delta || seg_round < prev_seg - min_delta;
            log.rounds.push(RoundSummary {
                round,
                cls_best_val: cls_round,
                seg_best_val: seg_round,
                improved,
            });
            if let Some(dir) = out_dir {
                write_log(dir, &log)?;
            }
            if !improved {
                log.stop_reason = Some("no_round_improvement".into());
                break 'rounds;
            }
        }
    }

    if log.stop_reason.is_none() {
        log.stop_reason = Some("max_rounds".into());
    }
    if let Some(dir) = out_dir {
        write_log(dir, &log)?;
    }
    Ok(finish(log, best_cls, best_seg, &cls_params, &seg_params, true))
}

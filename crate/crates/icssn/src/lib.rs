//! ICSSN: iterative classification and semantic segmentation network for
//! old-landslide mapping from remote-sensing tiles.
//!
//! The crate implements the full method as a library:
//!
//! * [`data`] — tiling, histogram equalisation, augmentation, stratified
//!   splits, and a synthetic scene generator so everything is testable
//!   without the original imagery.
//! * [`nn`] — a small, deterministic `f64` tensor/layer core (convolution,
//!   transposed convolution, batch norm, pooling, …) with explicit forward
//!   caches and hand-written backward passes.
//! * [`encoder`] — the shared feature encoder: dilated ResNet backbone with
//!   mid/deep feature concatenation, ASPP, and squeeze-and-excitation.
//! * [`classifier`] — the siamese object-pair classification branch and its
//!   object-level contrastive pairing rules.
//! * [`segmenter`] — the decoder, the pixel loss, and sub-object-level
//!   contrastive learning (block labelling, pair selection, combined loss).
//! * [`train`] — SGD with cosine annealing, checkpointing, and the
//!   alternating two-branch training loop with encoder transfer.
//! * [`metrics`] — pixel/object evaluation: PA, precision, recall, IoU,
//!   mIoU, F1, and the object-level accuracy rules.
//! * [`cam`] — Grad-CAM attribution for both branches.
//! * [`report`] — model size / compute summaries and result tables.
//!
//! Entry points for the common workflows live in the `examples/` directory;
//! the `icssn` binary exposes the same flows as subcommands.

pub mod cam;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod seed;
pub mod segmenter;
pub mod train;

pub use error::{IcssnError, Result};

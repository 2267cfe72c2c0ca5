//! Identity verification for visually patterned individuals, end to end:
//! bounding-box tracklet clustering, triplet-loss training of a small
//! convolutional embedding encoder with in-batch violating-triplet mining,
//! and verification metrics (ROC, AUC, TPR@FPR, distance reports).
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tracklet`] — cluster per-frame detections into identities with an
//!   IOU + frame-gap distance and DBSCAN.
//! - [`synth`] — generate a labeled synthetic spot-pattern dataset and apply
//!   tilt / vertical-shift / brightness augmentation.
//! - [`model`] — a from-scratch convolutional encoder (manual forward and
//!   backward passes) producing unit-norm embeddings, with SGD/Adam.
//! - [`triplets`] — triplet loss, its gradient, the in-batch violating
//!   triplet miner, and the training loop.
//! - [`eval`] — pairwise verification metrics and a 2-D projection export.
//!
//! Supporting modules: [`rng`] (seeded, named sub-streams), [`fnt`] (the
//! flat tensor file format), [`types`] (domain types), [`io`] (CSV/JSONL
//! readers and writers).

pub mod error;
pub mod eval;
pub mod fnt;
pub mod io;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tracklet;
pub mod triplets;
pub mod types;

pub use error::{Error, Result};

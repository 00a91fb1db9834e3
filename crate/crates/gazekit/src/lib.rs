//! gazekit: synthetic eye-region data generation, two-channel eye
//! segmentation, contrastive encoder pretraining, and multistream gaze
//! regression, with a cross-validation experiment harness.
//!
//! The pipeline stages mirror the `gazekit` CLI subcommands:
//!
//! 1. `synth-gen` renders a labeled synthetic eye dataset (images, masks,
//!    gaze records, JSON-lines manifest).
//! 2. `train-seg` trains the two-channel segmenter on that data.
//! 3. `ssl-pretrain` learns an eye-image encoder with a contrastive loss
//!    over augmented positive pairs; no labels consulted.
//! 4. `train-gaze` fine-tunes the three-stream gaze regressor.
//! 5. `predict`, `eval`, `ablate`, `report` run inference, cross-validated
//!    experiments, label-fraction ablations, and report rendering.

pub mod augment;
pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod pngio;
pub mod rng;
pub mod segmenter;
pub mod synth;

pub use error::{Error, Result};

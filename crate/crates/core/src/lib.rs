//! Desk-scale RGBD depth-completion workbench.
//!
//! The crate covers the whole loop: analytic RGBD scene synthesis, sensor-like
//! degradation, multi-view TSDF fusion for ground truth, a small reverse-mode
//! autodiff engine, the residual encoder-decoder, its composite loss, and the
//! training / ablation harness driven by the `depthwork` binary.

// `!(x > 0.0)` is the NaN-rejecting form used throughout for validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod camera;
pub mod cli;
pub mod grid;
pub mod harness;
pub mod losses;
pub mod model;
pub mod plot;
pub mod synth;
pub mod tsdf;

//! DiffSketch at desk scale: select representative denoising features from a
//! diffusion trajectory, train a one-shot sketch generator on them with
//! directional-embedding losses and CDST sampling, and distill the trained
//! generator into a fast image-to-sketch student.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`feature_store`] — tensor containers, the on-disk archive format, and
//!   the pluggable diffusion backend (a deterministic toy backend ships with
//!   the crate).
//! - [`selection`] — PCA projection, k-means with silhouette/Davies-Bouldin
//!   scoring, optimal cluster count, and representative timestep selection.
//! - [`generator`] — the two-level feature aggregator and feature-fusing
//!   decoder that emit a sketch.
//! - [`objectives`] — reconstruction and directional embedding losses.
//! - [`cdst`] — condition diffusion sampling for training, with the
//!   distribution-fitting and validation toolkit (normality tests, EMD,
//!   confidence scores).
//! - [`trainer`] / [`distiller`] — the one-shot training loop and the
//!   teacher-to-student distillation procedure.
//! - [`metrics`] — SSIM, pluggable perceptual distance, and the ablation
//!   harness.

pub mod autodiff;
pub mod cdst;
pub mod checkpoint;
pub mod convert;
pub mod distiller;
pub mod feature_store;
pub mod generator;
pub mod metrics;
pub mod objectives;
pub mod seeding;
pub mod selection;
pub mod tensor;
pub mod trainer;

pub use tensor::Tensor;

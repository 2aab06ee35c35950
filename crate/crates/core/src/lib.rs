//! Measure and improve the multiview 3D equivariance of dense image features.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: pinhole cameras, depth maps, ground-truth correspondences
//!   and analytic synthetic scenes.
//! - [`featstore`]: patch-resolution feature maps, bilinear sampling and
//!   normalization.
//! - [`matching`]: nearest-neighbor search over per-pixel feature fields.
//! - [`metrics`]: APE, PCDP, PCK, pose accuracy and tracking metrics.
//! - [`smoothap`]: the SmoothAP ranking loss and a contrastive baseline.
//! - [`convhead`]: the appended 3x3 convolution head, AdamW and the
//!   correspondence finetuning loop.
//! - [`eval`]: the view-pair equivariance protocol.
//! - [`pose`], [`tracking`], [`semcorr`]: downstream task pipelines.
//! - [`manifest`], [`synth`]: dataset manifests and analytic fixtures.
//! - [`cli`]: manifests, reports and the command implementations behind the
//!   `equiv3d` binary.

pub mod cli;
pub mod convhead;
pub mod error;
pub mod eval;
pub mod featstore;
pub mod geometry;
pub mod manifest;
pub mod matching;
pub mod metrics;
pub mod pose;
pub mod rng;
pub mod semcorr;
pub mod smoothap;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};

/// Toolkit version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

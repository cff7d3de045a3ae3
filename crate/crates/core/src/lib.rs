//! Photoacoustic tomography reconstruction with a learned normalizing-flow prior.
//!
//! The crate is organized bottom-up:
//!
//! * [`volume`]: grids, trilinear sampling, VOL1 files, phantoms, augmentation.
//! * [`acoustics`]: hemispherical geometry, the Kirchhoff forward operator and
//!   its exact discrete adjoint, measurement noise, MES1 files.
//! * [`flow`]: a Glow-style invertible network with exact log-determinants and
//!   hand-written reverse-mode gradients.
//! * [`training`]: maximum-likelihood fitting, checkpoints, the reference
//!   constant `C` (mean negative log-density over the training set).
//! * [`solver`]: MAP objective, incremental gradient descent, the adaptive
//!   bracketing rule for the regularization weight, patch priors.
//! * [`baselines`]: smoothed total variation.
//! * [`metrics`]: affine fit, RRA, PSNR, SSIM.
//! * [`cli`]: experiment configuration and subcommands.

// `!(a > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustics;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod metrics;
pub mod solver;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Volume;

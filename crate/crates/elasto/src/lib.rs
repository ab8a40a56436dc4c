//! Variational ultrasound elastography toolkit.
//!
//! Estimates axial and lateral displacement fields between pre- and
//! post-compression RF frames by direct first-order optimization of a
//! composite objective: a windowed L1 data term on warped three-channel RF
//! data, first/second-order strain smoothness, a feasibility constraint on
//! the effective Poisson's ratio (EPR) of the estimated strains, and an
//! optional two-pass self-consistency penalty. An analytic speckle phantom
//! with exact ground truth and a quantitative metric suite (MAE, SSIM,
//! CNR/SR, EPR histograms, strain scatter hulls) round out the toolkit.
//!
//! Module map:
//! - [`grid`]: grids, multi-channel fields, frames, displacement fields
//! - [`rng`]: deterministic seeding
//! - [`io`]: binary field files with text sidecar headers
//! - [`signal`]: analytic signal / envelope, PSF kernels, noise injection
//! - [`phantom`]: analytic compression phantom with exact ground truth
//! - [`warp`]: bicubic warping and the windowed L1 data loss
//! - [`strain`]: strain tensors and smoothness losses
//! - [`picture`]: EPR computation, feasibility mask, and EPR penalties
//! - [`ssl`]: input transforms and the two-pass consistency scheme
//! - [`solver`]: coarse-to-fine optimizer and gradient verification
//! - [`metrics`]: MAE, SSIM, CNR/SR, histograms, strain scatter

pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod picture;
pub mod rng;
pub mod signal;
pub mod solver;
pub mod ssl;
pub mod strain;
pub mod warp;

pub(crate) mod util;

pub use error::{ElastoError, Result};

//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ElastoError>;

#[derive(Debug, Error)]
pub enum ElastoError {
    #[error("grid dimension too small: {height}x{width} (minimum 8x8)")]
    DimensionTooSmall { height: usize, width: usize },

    #[error("sample pitch must be positive: dz={dz} mm, dx={dx} mm")]
    NonPositivePitch { dz: f64, dx: f64 },

    #[error("data length {got} does not match {channels} channel(s) of {height}x{width}")]
    ShapeMismatch {
        got: usize,
        channels: usize,
        height: usize,
        width: usize,
    },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("envelope identity violated at index {index}: env^2={env_sq}, rf^2+imag^2={sum_sq}")]
    EnvelopeIdentity {
        index: usize,
        env_sq: f64,
        sum_sq: f64,
    },

    #[error("input too short: {len} samples (minimum {min})")]
    TooShortInput { len: usize, min: usize },

    #[error("normalized center frequency {f0_over_fs} outside (0, 0.5)")]
    FrequencyOutOfRange { f0_over_fs: f64 },

    #[error("grids do not match: {0}")]
    GridMismatch(String),

    #[error("window size must be odd and >= 1, got {0}")]
    EvenWindow(usize),

    #[error("no valid pixels in the loss region")]
    EmptyValidRegion,

    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),

    #[error("inclusions overlap: {0} and {1}")]
    OverlappingInclusions(usize, usize),

    #[error("inclusion {0} extends outside the grid")]
    InclusionOutsideGrid(usize),

    #[error("scatterer density too low: {per_footprint:.2} per PSF footprint (minimum 2)")]
    DensityTooLow { per_footprint: f64 },

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("transform overlap region is empty")]
    EmptyOverlap,

    #[error("solver diverged at level {level}, iteration {iter}")]
    Divergence { level: usize, iter: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid metric window: {0}")]
    InvalidWindow(String),

    #[error("truth image has zero dynamic range")]
    ZeroDynamicRange,

    #[error("histogram range is empty: lo={lo}, hi={hi}")]
    EmptyHistogramRange { lo: f64, hi: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad field header: {0}")]
    HeaderParse(String),
}

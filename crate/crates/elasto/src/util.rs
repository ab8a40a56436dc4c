//! Small internal helpers shared across modules.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n` (one call per row/column index), collecting results
/// in index order. Parallel when the `parallel` feature is on; the output is
/// identical either way since each index is computed independently.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Mean with 64-bit accumulation.
pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Root mean square with 64-bit accumulation.
pub(crate) fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Derivative of the smoothed absolute value sqrt(x^2 + delta^2).
///
/// With delta = 0 this degrades gracefully to sign(x) (0 at 0).
#[inline]
pub(crate) fn smooth_abs_grad(x: f64, delta: f64) -> f64 {
    if delta == 0.0 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        x / (x * x + delta * delta).sqrt()
    }
}

/// Smoothing width for L1 gradients: 1e-6 of the argument's RMS.
pub(crate) fn l1_delta(xs: &[f64]) -> f64 {
    1e-6 * rms(xs)
}

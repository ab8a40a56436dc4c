//! Quantitative evaluation: MAE, SSIM, CNR/SR, EPR histograms and
//! axial-versus-lateral strain scatter with convex hulls.

use crate::error::{ElastoError, Result};
use crate::grid::DispField;
use crate::strain::StrainField;

/// Displacement axis selector for metric reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Axial,
    Lateral,
}

/// Mean absolute elementwise difference of two slices.
pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Displacement MAE in micrometers, converting sample units with the grid
/// pitch of the chosen axis.
pub fn mae_disp_um(estimate: &DispField, truth: &DispField, axis: Axis) -> Result<f64> {
    estimate.grid().require_same(truth.grid(), "mae_disp_um")?;
    let (e, t, pitch_mm) = match axis {
        Axis::Axial => (estimate.axial(), truth.axial(), estimate.grid().dz_mm),
        Axis::Lateral => (estimate.lateral(), truth.lateral(), estimate.grid().dx_mm),
    };
    Ok(mean_abs_diff(e, t) * pitch_mm * 1000.0)
}

/// Strain-component MAE (dimensionless).
pub fn mae_strain(estimate: &StrainField, truth: &StrainField, axis: Axis) -> Result<f64> {
    estimate.grid().require_same(truth.grid(), "mae_strain")?;
    let (e, t) = match axis {
        Axis::Axial => (&estimate.e11, &truth.e11),
        Axis::Lateral => (&estimate.e22, &truth.e22),
    };
    Ok(mean_abs_diff(e, t))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as i64;
    let mut w: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / SSIM_SIGMA).powi(2)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean local SSIM over all positions where the 11x11 Gaussian window fits,
/// with the dynamic range taken from the truth image `b`.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let lo = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(ElastoError::ZeroDynamicRange);
    }
    ssim_with_range(a, b, h, w, range)
}

/// SSIM with an externally fixed dynamic range (symmetric in `a` and `b`).
pub fn ssim_with_range(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(ElastoError::ShapeMismatch { got: a.len().min(b.len()), channels: 1, height: h, width: w });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ElastoError::InvalidWindow(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;

    // Separable Gaussian filtering of the five moment images.
    let filt = |src: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; h * w];
        for r in 0..h {
            for col in half..w - half {
                let mut acc = 0.0;
                for (k, &wk) in win.iter().enumerate() {
                    acc += wk * src[r * w + col + k - half];
                }
                tmp[r * w + col] = acc;
            }
        }
        let mut out = vec![0.0; h * w];
        for r in half..h - half {
            for col in 0..w {
                let mut acc = 0.0;
                for (k, &wk) in win.iter().enumerate() {
                    acc += wk * tmp[(r + k - half) * w + col];
                }
                out[r * w + col] = acc;
            }
        }
        out
    };

    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    let mu_a = filt(a);
    let mu_b = filt(b);
    let m_aa = filt(&aa);
    let m_bb = filt(&bb);
    let m_ab = filt(&ab);

    let mut total = 0.0;
    let mut count = 0usize;
    for r in half..h - half {
        for col in half..w - half {
            let i = r * w + col;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Rectangular analysis window in sample coordinates (inclusive start,
/// exclusive end).
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub a0: usize,
    pub l0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    fn end(&self) -> (usize, usize) {
        (self.a0 + self.h, self.l0 + self.w)
    }

    fn area(&self) -> usize {
        self.h * self.w
    }

    fn intersects(&self, other: &Rect) -> bool {
        let (ae, le) = self.end();
        let (obe, ole) = other.end();
        self.a0 < obe && other.a0 < ae && self.l0 < ole && other.l0 < le
    }
}

/// CNR and SR between target and background windows; either value can be
/// undefined (zero joint variance, zero background mean) and is reported as
/// `None` rather than NaN.
#[derive(Clone, Copy, Debug)]
pub struct CnrSr {
    pub cnr: Option<f64>,
    pub sr: Option<f64>,
}

fn window_stats(img: &[f64], grid: (usize, usize), rect: &Rect) -> (f64, f64) {
    let (_, w) = grid;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for a in rect.a0..rect.a0 + rect.h {
        for l in rect.l0..rect.l0 + rect.w {
            let v = img[a * w + l];
            sum += v;
            sum_sq += v * v;
        }
    }
    let n = rect.area() as f64;
    let mean = sum / n;
    // Population standard deviation (no Bessel correction).
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Contrast-to-noise ratio and strain ratio of a strain image between a
/// target window and a background window.
pub fn cnr_sr(
    strain_img: &[f64],
    grid: (usize, usize),
    target: &Rect,
    background: &Rect,
) -> Result<CnrSr> {
    let (h, w) = grid;
    if strain_img.len() != h * w {
        return Err(ElastoError::ShapeMismatch { got: strain_img.len(), channels: 1, height: h, width: w });
    }
    for (name, r) in [("target", target), ("background", background)] {
        let (ae, le) = r.end();
        if ae > h || le > w {
            return Err(ElastoError::InvalidWindow(format!("{name} window exceeds the grid")));
        }
        if r.area() < 16 {
            return Err(ElastoError::InvalidWindow(format!(
                "{name} window has {} pixels (minimum 16)",
                r.area()
            )));
        }
    }
    if target.intersects(background) {
        return Err(ElastoError::InvalidWindow("windows overlap".into()));
    }
    let (mt, st) = window_stats(strain_img, grid, target);
    let (mb, sb) = window_stats(strain_img, grid, background);
    let joint_var = sb * sb + st * st;
    let cnr = if joint_var > 0.0 {
        Some((2.0 * (mb - mt) * (mb - mt) / joint_var).sqrt())
    } else {
        None
    };
    let sr = if mb != 0.0 { Some(mt / mb) } else { None };
    Ok(CnrSr { cnr, sr })
}

/// Histogram with explicit under/overflow buckets.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// Lower edge of bin `i`.
    pub fn bin_edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.counts.len() as f64
    }
}

/// Uniform-bin histogram of EPR (or any scalar) values.
pub fn epr_histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins < 2 {
        return Err(ElastoError::InvalidConfig(format!("need at least 2 bins, got {bins}")));
    }
    if !(lo < hi) {
        return Err(ElastoError::EmptyHistogramRange { lo, hi });
    }
    let mut counts = vec![0u64; bins];
    let mut underflow = 0u64;
    let mut overflow = 0u64;
    let scale = bins as f64 / (hi - lo);
    for &v in values {
        if v < lo {
            underflow += 1;
        } else if v >= hi {
            overflow += 1;
        } else {
            let b = ((v - lo) * scale) as usize;
            counts[b.min(bins - 1)] += 1;
        }
    }
    Ok(Histogram { lo, hi, counts, underflow, overflow })
}

/// Strain scatter: subsampled (e11, e22) pairs and their convex hull.
#[derive(Clone, Debug)]
pub struct StrainScatter {
    pub points: Vec<(f64, f64)>,
    pub hull: Vec<(f64, f64)>,
}

pub fn strain_scatter(strain: &StrainField, sample_stride: usize) -> StrainScatter {
    let stride = sample_stride.max(1);
    let points: Vec<(f64, f64)> = strain
        .e11
        .iter()
        .zip(strain.e22.iter())
        .step_by(stride)
        .map(|(&a, &b)| (a, b))
        .collect();
    let hull = convex_hull(&points);
    StrainScatter { points, hull }
}

/// Convex hull by Andrew's monotone chain, counter-clockwise, with strictly
/// collinear points dropped. Degenerate inputs return what remains: a
/// single point or the two endpoints of a segment.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let n = pts.len();
    if n <= 2 {
        return pts;
    }
    // Left turn with a relative tolerance so nearly collinear points (exact
    // lines evaluated in floating point) collapse onto their segment.
    let turns_left = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| -> bool {
        let cross = (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
        let scale = (a.0 - o.0).hypot(a.1 - o.1) * (b.0 - o.0).hypot(b.1 - o.1);
        cross > 1e-12 * scale
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && !turns_left(lower[lower.len() - 2], lower[lower.len() - 1], p) {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && !turns_left(upper[upper.len() - 2], upper[upper.len() - 1], p) {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 2 {
        // All points collinear: keep the two extreme ones.
        return vec![pts[0], pts[n - 1]];
    }
    lower
}

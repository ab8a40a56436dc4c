//! Self-supervision transforms and the two-pass consistency scheme.
//!
//! A first solve runs on the untransformed pair. The pair is then made
//! harder (cropping, circular noise regions) and solved again with a
//! penalty anchoring the new field to the frozen first-pass estimate; the
//! anchor receives no gradient, so consistency can only shape the second
//! pass. The first-pass field remains the reported estimate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ElastoError, Result};
use crate::grid::{DispField, GridSpec, UsFrame};
use crate::rng::SeededRng;
use crate::signal::frame_from_rf;
use crate::solver::{solve, LossReport, SolverConfig};
use crate::util::rms;

/// Circular region that receives strong additive noise.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseDisc {
    /// Center in samples (axial, lateral).
    pub center: (f64, f64),
    pub radius: f64,
    /// Noise standard deviation as a multiple of the frame's RF RMS.
    pub noise_std_rms: f64,
}

/// One input transform of the second pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SslTransform {
    /// Keep the rectangle starting at (a0, l0) of size h x w.
    Crop { a0: usize, l0: usize, h: usize, w: usize },
    /// Add Gaussian noise inside circular regions of the RF channel and
    /// re-derive the other channels.
    NoiseDiscs { discs: Vec<NoiseDisc> },
}

/// Offset mapping transformed coordinates back to the original grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CoordMap {
    pub a_off: usize,
    pub l_off: usize,
}

/// Applies a transform to a frame. Returns the transformed frame and the
/// coordinate offset of its origin in the input frame (zero for noise).
pub fn apply_transform(
    frame: &UsFrame,
    transform: &SslTransform,
    rng: &mut SeededRng,
) -> Result<(UsFrame, CoordMap)> {
    let grid = *frame.grid();
    match transform {
        SslTransform::Crop { a0, l0, h, w } => {
            if a0 + h > grid.height || l0 + w > grid.width {
                return Err(ElastoError::InvalidTransform(format!(
                    "crop {a0},{l0} {h}x{w} exceeds {}x{}",
                    grid.height, grid.width
                )));
            }
            if *h < grid.height.div_ceil(2) || *w < grid.width.div_ceil(2) {
                return Err(ElastoError::InvalidTransform(
                    "crop must retain at least half the frame in each direction".into(),
                ));
            }
            let sub = GridSpec::new(*h, *w, grid.dz_mm, grid.dx_mm)?;
            let cut = |src: &[f64]| -> Vec<f64> {
                let mut out = Vec::with_capacity(h * w);
                for a in *a0..a0 + h {
                    out.extend_from_slice(&src[a * grid.width + l0..a * grid.width + l0 + w]);
                }
                out
            };
            let frame = UsFrame::from_channels(sub, cut(frame.rf()), cut(frame.env()), cut(frame.imag()))?;
            Ok((frame, CoordMap { a_off: *a0, l_off: *l0 }))
        }
        SslTransform::NoiseDiscs { discs } => {
            let rf_rms = rms(frame.rf());
            for (i, d) in discs.iter().enumerate() {
                if !(d.noise_std_rms > 0.0) || !(d.radius > 0.0) {
                    return Err(ElastoError::InvalidTransform(format!(
                        "disc {i} needs positive radius and noise std"
                    )));
                }
                if d.center.0 < 0.0
                    || d.center.0 > (grid.height - 1) as f64
                    || d.center.1 < 0.0
                    || d.center.1 > (grid.width - 1) as f64
                {
                    return Err(ElastoError::InvalidTransform(format!("disc {i} outside grid")));
                }
            }
            let mut rf = frame.rf().to_vec();
            let mut touched = false;
            for d in discs {
                let std = d.noise_std_rms * rf_rms;
                let r2 = d.radius * d.radius;
                for a in 0..grid.height {
                    for l in 0..grid.width {
                        let da = a as f64 - d.center.0;
                        let dl = l as f64 - d.center.1;
                        if da * da + dl * dl <= r2 {
                            let z: f64 = StandardNormal.sample(rng);
                            rf[a * grid.width + l] += std * z;
                            touched = true;
                        }
                    }
                }
            }
            if !touched || rf_rms == 0.0 {
                // Nothing changed (zero std comes here via validation, so
                // this covers discs that cover no samples).
                return Ok((frame.clone(), CoordMap::default()));
            }
            Ok((frame_from_rf(grid, rf)?, CoordMap::default()))
        }
    }
}

/// Consistency loss between the (frozen) first-pass field and the
/// second-pass field on their overlap: per-component mean absolute
/// difference, averaged over the two components. `overlap` optionally
/// restricts the comparison.
pub fn ssl_loss(
    w_first: &DispField,
    w_second: &DispField,
    coord_map: CoordMap,
    overlap: Option<&[u8]>,
) -> Result<f64> {
    let gs = w_second.grid();
    let gf = w_first.grid();
    if coord_map.a_off + gs.height > gf.height || coord_map.l_off + gs.width > gf.width {
        return Err(ElastoError::GridMismatch(
            "second-pass grid does not fit inside the first-pass grid at the given offset".into(),
        ));
    }
    if let Some(mask) = overlap {
        if mask.len() != gs.len() {
            return Err(ElastoError::ShapeMismatch {
                got: mask.len(),
                channels: 1,
                height: gs.height,
                width: gs.width,
            });
        }
    }
    let mut count = 0usize;
    let mut acc1 = 0.0;
    let mut acc2 = 0.0;
    for a in 0..gs.height {
        for l in 0..gs.width {
            let i = a * gs.width + l;
            if let Some(mask) = overlap {
                if mask[i] == 0 {
                    continue;
                }
            }
            let j = (a + coord_map.a_off) * gf.width + (l + coord_map.l_off);
            acc1 += (w_second.axial()[i] - w_first.axial()[j]).abs();
            acc2 += (w_second.lateral()[i] - w_first.lateral()[j]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(ElastoError::EmptyOverlap);
    }
    Ok(0.5 * (acc1 + acc2) / count as f64)
}

/// Parameters of the default second-pass transforms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SslParams {
    /// Fraction of each dimension the crop retains.
    pub crop_frac: f64,
    pub n_discs: usize,
    /// Disc radius as a fraction of the frame height.
    pub disc_radius_frac: f64,
    /// Disc noise std as a multiple of RF RMS.
    pub noise_std_rms: f64,
    pub seed: u64,
}

impl Default for SslParams {
    fn default() -> Self {
        Self { crop_frac: 0.75, n_discs: 3, disc_radius_frac: 0.05, noise_std_rms: 2.0, seed: 0 }
    }
}

impl SslParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_frac >= 0.5 && self.crop_frac <= 1.0) {
            return Err(ElastoError::InvalidTransform(format!(
                "crop_frac {} outside [0.5, 1]",
                self.crop_frac
            )));
        }
        if self.n_discs > 0 && !(self.disc_radius_frac > 0.0 && self.noise_std_rms > 0.0) {
            return Err(ElastoError::InvalidTransform(
                "discs need positive radius fraction and noise std".into(),
            ));
        }
        Ok(())
    }

    /// Builds the concrete transforms for a grid: a seeded random crop
    /// followed by seeded noise discs (applied to the post frame only).
    pub fn build_transforms(&self, grid: &GridSpec, rng: &mut SeededRng) -> Result<Vec<SslTransform>> {
        self.validate()?;
        let mut out = Vec::new();
        let h = ((grid.height as f64 * self.crop_frac).round() as usize)
            .clamp(grid.height.div_ceil(2), grid.height);
        let w = ((grid.width as f64 * self.crop_frac).round() as usize)
            .clamp(grid.width.div_ceil(2), grid.width);
        if h < grid.height || w < grid.width {
            let a0 = if h < grid.height { rng.random_range(0..=grid.height - h) } else { 0 };
            let l0 = if w < grid.width { rng.random_range(0..=grid.width - w) } else { 0 };
            out.push(SslTransform::Crop { a0, l0, h, w });
        }
        if self.n_discs > 0 {
            let radius = (self.disc_radius_frac * grid.height as f64).max(1.0);
            let discs: Vec<NoiseDisc> = (0..self.n_discs)
                .map(|_| NoiseDisc {
                    center: (
                        rng.random_range(0.0..(grid.height - 1) as f64),
                        rng.random_range(0.0..(grid.width - 1) as f64),
                    ),
                    radius,
                    noise_std_rms: self.noise_std_rms,
                })
                .collect();
            // Disc centers are drawn on the full grid, then shifted into the
            // cropped frame when a crop precedes them.
            out.push(SslTransform::NoiseDiscs { discs });
        }
        Ok(out)
    }
}

/// Result of the two-pass scheme; `first` is the reported estimate.
#[derive(Clone, Debug)]
pub struct TwoStageResult {
    pub first: DispField,
    pub second: DispField,
    pub report_first: LossReport,
    pub report_second: LossReport,
    pub coord_map: CoordMap,
}

/// Two-pass solve: stage one on the raw pair, stage two on the transformed
/// pair with its field anchored to the frozen stage-one estimate through
/// `cfg.lambda_sl`. Both frames are cropped identically; noise discs hit
/// the post-compression frame only (the hardest correspondence case).
pub fn two_stage_solve(
    pre: &UsFrame,
    post: &UsFrame,
    cfg: &SolverConfig,
    params: &SslParams,
) -> Result<TwoStageResult> {
    params.validate()?;
    let (first, report_first) = solve(pre, post, cfg, None)?;

    let mut rng = crate::rng::seeded_rng(params.seed);
    let transforms = params.build_transforms(pre.grid(), &mut rng)?;

    let mut pre_t = pre.clone();
    let mut post_t = post.clone();
    let mut map = CoordMap::default();
    for t in &transforms {
        match t {
            SslTransform::Crop { .. } => {
                let (p, m) = apply_transform(&pre_t, t, &mut rng)?;
                let (q, _) = apply_transform(&post_t, t, &mut rng)?;
                pre_t = p;
                post_t = q;
                map = m;
            }
            SslTransform::NoiseDiscs { discs } => {
                // Shift disc coordinates into the cropped frame; discs that
                // fall outside are clamped to its edge.
                let g = pre_t.grid();
                let shifted: Vec<NoiseDisc> = discs
                    .iter()
                    .map(|d| NoiseDisc {
                        center: (
                            (d.center.0 - map.a_off as f64).clamp(0.0, (g.height - 1) as f64),
                            (d.center.1 - map.l_off as f64).clamp(0.0, (g.width - 1) as f64),
                        ),
                        ..*d
                    })
                    .collect();
                let (q, _) =
                    apply_transform(&post_t, &SslTransform::NoiseDiscs { discs: shifted }, &mut rng)?;
                post_t = q;
            }
        }
    }

    // Anchor: the frozen stage-one field restricted to the transformed grid.
    let gs = *pre_t.grid();
    let gf = *pre.grid();
    let mut a1 = Vec::with_capacity(gs.len());
    let mut a2 = Vec::with_capacity(gs.len());
    for a in 0..gs.height {
        for l in 0..gs.width {
            let j = (a + map.a_off) * gf.width + (l + map.l_off);
            a1.push(first.axial()[j]);
            a2.push(first.lateral()[j]);
        }
    }
    let anchor = DispField::from_components(gs, a1, a2)?;
    let (second, report_second) = solve(&pre_t, &post_t, cfg, Some((&anchor, cfg.lambda_sl)))?;

    Ok(TwoStageResult { first, second, report_first, report_second, coord_map: map })
}

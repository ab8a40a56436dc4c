//! Differentiable image warping and the windowed L1 data loss.
//!
//! Warping samples each channel at (a + W1, l + W2) with Catmull-Rom
//! bicubic interpolation. Bilinear interpolation would attenuate the RF
//! carrier and bias axial estimates, so the cubic kernel is used even
//! though it costs 16 taps. A sample is valid when its location lies in
//! [1, H-2] x [1, W-2], where the full cubic support is available;
//! out-of-range taps clamp to the edge but such pixels are excluded from
//! losses through the validity mask.

use crate::error::{ElastoError, Result};
use crate::grid::{DispField, Field2D, UsFrame};
use crate::util::map_indexed;

/// Catmull-Rom weights for fractional position `f` in [0, 1).
#[inline]
pub(crate) fn catmull_rom_weights(f: f64) -> [f64; 4] {
    let f2 = f * f;
    let f3 = f2 * f;
    [
        -0.5 * f3 + f2 - 0.5 * f,
        1.5 * f3 - 2.5 * f2 + 1.0,
        -1.5 * f3 + 2.0 * f2 + 0.5 * f,
        0.5 * f3 - 0.5 * f2,
    ]
}

/// Derivatives of the Catmull-Rom weights with respect to `f`.
#[inline]
pub(crate) fn catmull_rom_dweights(f: f64) -> [f64; 4] {
    let f2 = f * f;
    [
        -1.5 * f2 + 2.0 * f - 0.5,
        4.5 * f2 - 5.0 * f,
        -4.5 * f2 + 4.0 * f + 0.5,
        1.5 * f2 - f,
    ]
}

/// Bicubic sample of one channel at (y, x) with clamp-to-edge taps.
/// Returns (value, d/dy, d/dx).
#[inline]
pub(crate) fn bicubic_sample(data: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let iy = y.floor();
    let ix = x.floor();
    let fy = y - iy;
    let fx = x - ix;
    let wy = catmull_rom_weights(fy);
    let dwy = catmull_rom_dweights(fy);
    let wx = catmull_rom_weights(fx);
    let dwx = catmull_rom_dweights(fx);
    let iy = iy as i64;
    let ix = ix as i64;
    let clamp = |v: i64, n: usize| -> usize { v.clamp(0, n as i64 - 1) as usize };
    let mut val = 0.0;
    let mut dy = 0.0;
    let mut dx = 0.0;
    for (k, (&wyk, &dwyk)) in wy.iter().zip(dwy.iter()).enumerate() {
        let row = clamp(iy - 1 + k as i64, h) * w;
        let mut rv = 0.0;
        let mut rd = 0.0;
        for (j, (&wxj, &dwxj)) in wx.iter().zip(dwx.iter()).enumerate() {
            let s = data[row + clamp(ix - 1 + j as i64, w)];
            rv += wxj * s;
            rd += dwxj * s;
        }
        val += wyk * rv;
        dy += dwyk * rv;
        dx += wyk * rd;
    }
    (val, dy, dx)
}

#[inline]
pub(crate) fn sample_is_valid(y: f64, x: f64, h: usize, w: usize) -> bool {
    y >= 1.0 && y <= (h - 2) as f64 && x >= 1.0 && x <= (w - 2) as f64
}

/// Warps a frame by a displacement field.
///
/// Returns the warped three-channel field and the per-pixel validity mask
/// (1 where the sample location has full cubic support).
pub fn warp_frame(frame: &UsFrame, disp: &DispField) -> Result<(Field2D, Vec<u8>)> {
    frame.grid().require_same(disp.grid(), "warp_frame")?;
    let grid = *frame.grid();
    let (h, w) = (grid.height, grid.width);
    let field = frame.as_field();
    let w1 = disp.axial();
    let w2 = disp.lateral();

    let rows: Vec<(Vec<f64>, Vec<u8>)> = map_indexed(h, |a| {
        let mut out = vec![0.0; 3 * w];
        let mut valid = vec![0u8; w];
        for l in 0..w {
            let i = a * w + l;
            let y = a as f64 + w1[i];
            let x = l as f64 + w2[i];
            valid[l] = sample_is_valid(y, x, h, w) as u8;
            for c in 0..3 {
                let (v, _, _) = bicubic_sample(field.channel(c), h, w, y, x);
                out[c * w + l] = v;
            }
        }
        (out, valid)
    });

    let n = grid.len();
    let mut data = vec![0.0; 3 * n];
    let mut validity = vec![0u8; n];
    for (a, (row, valid)) in rows.into_iter().enumerate() {
        for c in 0..3 {
            data[c * n + a * w..c * n + (a + 1) * w].copy_from_slice(&row[c * w..(c + 1) * w]);
        }
        validity[a * w..(a + 1) * w].copy_from_slice(&valid);
    }
    Ok((Field2D::from_vec(grid, 3, data)?, validity))
}

/// Per-pixel loss weights of the windowed data term.
///
/// The data loss is the mean over valid pixels of the validity-weighted
/// window mean of per-pixel channel-summed absolute residuals. Expanding
/// the double sum gives one scalar weight per pixel:
/// `weight(q) = v(q)/|V| * sum_{p in N(q), v(p)=1} 1/n(p)` where `n(p)`
/// counts valid pixels in the window around `p`.
pub(crate) fn window_weights(validity: &[u8], h: usize, w: usize, window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window == 0 {
        return Err(ElastoError::EvenWindow(window));
    }
    let r = (window / 2) as i64;
    let total_valid = validity.iter().filter(|&&v| v == 1).count();
    if total_valid == 0 {
        return Err(ElastoError::EmptyValidRegion);
    }
    // n(p): valid count in the clipped window around p.
    let mut counts = vec![0u32; h * w];
    for a in 0..h as i64 {
        for l in 0..w as i64 {
            let mut c = 0u32;
            for da in -r..=r {
                let aa = a + da;
                if aa < 0 || aa >= h as i64 {
                    continue;
                }
                for dl in -r..=r {
                    let ll = l + dl;
                    if ll < 0 || ll >= w as i64 {
                        continue;
                    }
                    c += validity[(aa * w as i64 + ll) as usize] as u32;
                }
            }
            counts[(a * w as i64 + l) as usize] = c;
        }
    }
    let inv_total = 1.0 / total_valid as f64;
    let mut weights = vec![0.0; h * w];
    for a in 0..h as i64 {
        for l in 0..w as i64 {
            let q = (a * w as i64 + l) as usize;
            if validity[q] == 0 {
                continue;
            }
            let mut acc = 0.0;
            for da in -r..=r {
                let aa = a + da;
                if aa < 0 || aa >= h as i64 {
                    continue;
                }
                for dl in -r..=r {
                    let ll = l + dl;
                    if ll < 0 || ll >= w as i64 {
                        continue;
                    }
                    let p = (aa * w as i64 + ll) as usize;
                    if validity[p] == 1 {
                        acc += 1.0 / counts[p] as f64;
                    }
                }
            }
            weights[q] = acc * inv_total;
        }
    }
    Ok(weights)
}

/// Windowed L1 data loss between a reference field and a warped field.
///
/// Both fields must share grid and channel count; `window` is the odd side
/// length of the averaging neighborhood (3 in the default configuration).
pub fn data_loss(
    reference: &Field2D,
    warped: &Field2D,
    validity: &[u8],
    window: usize,
) -> Result<f64> {
    reference.grid().require_same(warped.grid(), "data_loss")?;
    if reference.channels() != warped.channels() {
        return Err(ElastoError::ShapeMismatch {
            got: warped.channels(),
            channels: reference.channels(),
            height: reference.grid().height,
            width: reference.grid().width,
        });
    }
    let grid = reference.grid();
    let (h, w) = (grid.height, grid.width);
    let weights = window_weights(validity, h, w, window)?;
    let n = grid.len();
    let mut loss = 0.0;
    for q in 0..n {
        if weights[q] == 0.0 {
            continue;
        }
        let mut d = 0.0;
        for c in 0..reference.channels() {
            d += (reference.channel(c)[q] - warped.channel(c)[q]).abs();
        }
        loss += weights[q] * d;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, GridSpec};
    use crate::rng::seeded_rng;
    use crate::signal::frame_from_rf;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn speckle_frame(grid: GridSpec, seed: u64) -> UsFrame {
        let mut rng = seeded_rng(seed);
        let rf: Vec<f64> = (0..grid.len())
            .map(|i| {
                let a = (i / grid.width) as f64;
                (1.3 * a).sin() + 0.5 * rng.random_range(-1.0..1.0)
            })
            .collect();
        frame_from_rf(grid, rf).unwrap()
    }

    #[test]
    fn identity_warp_reproduces_interior() {
        let grid = make_grid(32, 16, 1.0, 1.0).unwrap();
        let frame = speckle_frame(grid, 3);
        let disp = DispField::zeros(grid);
        let (warped, valid) = warp_frame(&frame, &disp).unwrap();
        for a in 1..31 {
            for l in 1..15 {
                let i = a * 16 + l;
                assert_eq!(valid[i], 1);
                for c in 0..3 {
                    assert_eq!(warped.channel(c)[i], frame.as_field().channel(c)[i]);
                }
            }
        }
        assert_eq!(valid[0], 0);
    }

    #[test]
    fn integer_shift_matches_shifted_copy() {
        let grid = make_grid(32, 16, 1.0, 1.0).unwrap();
        let frame = speckle_frame(grid, 7);
        // Shift content up by two rows: shifted[a] = frame[a + 2].
        let (h, w) = (32usize, 16usize);
        let n = h * w;
        let mut rf = vec![0.0; n];
        let mut env = vec![0.0; n];
        let mut imag = vec![0.0; n];
        for a in 0..h - 2 {
            for l in 0..w {
                rf[a * w + l] = frame.rf()[(a + 2) * w + l];
                env[a * w + l] = frame.env()[(a + 2) * w + l];
                imag[a * w + l] = frame.imag()[(a + 2) * w + l];
            }
        }
        let reference = UsFrame::from_channels(grid, rf, env, imag).unwrap();
        let disp = DispField::from_components(grid, vec![2.0; n], vec![0.0; n]).unwrap();
        let (warped, valid) = warp_frame(&frame, &disp).unwrap();
        for a in 1..h - 3 {
            for l in 1..w - 1 {
                let i = a * w + l;
                assert_eq!(valid[i], 1);
                for c in 0..3 {
                    assert_abs_diff_eq!(
                        warped.channel(c)[i],
                        reference.as_field().channel(c)[i],
                        epsilon = 1e-5
                    );
                }
            }
        }
    }

    #[test]
    fn all_out_of_bounds_means_no_validity() {
        let grid = make_grid(16, 16, 1.0, 1.0).unwrap();
        let frame = speckle_frame(grid, 1);
        let n = grid.len();
        let disp = DispField::from_components(grid, vec![100.0; n], vec![0.0; n]).unwrap();
        let (_, valid) = warp_frame(&frame, &disp).unwrap();
        assert!(valid.iter().all(|&v| v == 0));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let g1 = make_grid(16, 16, 1.0, 1.0).unwrap();
        let g2 = make_grid(16, 16, 2.0, 1.0).unwrap();
        let frame = speckle_frame(g1, 1);
        let disp = DispField::zeros(g2);
        assert!(warp_frame(&frame, &disp).is_err());
    }

    #[test]
    fn zero_residual_zero_loss() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        let f = Field2D::from_vec(grid, 3, (0..192).map(|i| i as f64).collect()).unwrap();
        let valid = vec![1u8; 64];
        assert_eq!(data_loss(&f, &f.clone(), &valid, 3).unwrap(), 0.0);
    }

    #[test]
    fn constant_residual_on_one_channel() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        let a = Field2D::from_vec(grid, 3, vec![1.0; 192]).unwrap();
        let mut b = a.clone();
        for v in b.channel_mut(1) {
            *v += 0.25;
        }
        let valid = vec![1u8; 64];
        let loss = data_loss(&a, &b, &valid, 3).unwrap();
        assert_abs_diff_eq!(loss, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn even_window_rejected() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        let f = Field2D::zeros(grid, 3);
        assert!(data_loss(&f, &f.clone(), &vec![1u8; 64], 4).is_err());
    }

    #[test]
    fn empty_valid_region_rejected() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        let f = Field2D::zeros(grid, 3);
        assert!(matches!(
            data_loss(&f, &f.clone(), &vec![0u8; 64], 3),
            Err(ElastoError::EmptyValidRegion)
        ));
    }

    /// Brute-force re-evaluation straight from the definition.
    fn data_loss_brute(
        reference: &Field2D,
        warped: &Field2D,
        validity: &[u8],
        window: usize,
    ) -> f64 {
        let (h, w) = (reference.grid().height, reference.grid().width);
        let r = (window / 2) as i64;
        let mut total = 0.0;
        let mut count = 0usize;
        for a in 0..h as i64 {
            for l in 0..w as i64 {
                let p = (a * w as i64 + l) as usize;
                if validity[p] == 0 {
                    continue;
                }
                let mut acc = 0.0;
                let mut nv = 0.0;
                for da in -r..=r {
                    for dl in -r..=r {
                        let (aa, ll) = (a + da, l + dl);
                        if aa < 0 || aa >= h as i64 || ll < 0 || ll >= w as i64 {
                            continue;
                        }
                        let q = (aa * w as i64 + ll) as usize;
                        if validity[q] == 0 {
                            continue;
                        }
                        let mut d = 0.0;
                        for c in 0..reference.channels() {
                            d += (reference.channel(c)[q] - warped.channel(c)[q]).abs();
                        }
                        acc += d;
                        nv += 1.0;
                    }
                }
                total += acc / nv;
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        for seed in 0..50 {
            let mut rng = seeded_rng(seed);
            let mk = |rng: &mut crate::rng::SeededRng| {
                Field2D::from_vec(
                    grid,
                    3,
                    (0..192).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let validity: Vec<u8> = (0..64).map(|_| rng.random_range(0..2) as u8).collect();
            if validity.iter().all(|&v| v == 0) {
                continue;
            }
            let fast = data_loss(&a, &b, &validity, 3).unwrap();
            let brute = data_loss_brute(&a, &b, &validity, 3);
            assert!((fast - brute).abs() <= 1e-6 * brute.abs().max(1e-12));
        }
    }
}

//! RF-domain signal processing: analytic signal, PSF kernels, noise.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{ElastoError, Result};
use crate::grid::{GridSpec, UsFrame};
use crate::rng::SeededRng;
use crate::util::map_indexed;

pub const MIN_SIGNAL_LEN: usize = 16;

/// Discrete analytic signal of a real vector via the FFT construction:
/// zero the negative frequencies, double the positive ones, keep DC and
/// Nyquist. Returns the imaginary part (the discrete Hilbert transform)
/// and the envelope sqrt(rf^2 + imag^2).
pub fn analytic_signal(rf: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rf.len();
    if n < MIN_SIGNAL_LEN {
        return Err(ElastoError::TooShortInput { len: n, min: MIN_SIGNAL_LEN });
    }
    let mut planner = FftPlanner::new();
    let imag = hilbert_with_planner(rf, &mut planner);
    let env = rf
        .iter()
        .zip(imag.iter())
        .map(|(&r, &i)| r.hypot(i))
        .collect();
    Ok((imag, env))
}

fn hilbert_with_planner(rf: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = rf.len();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = rf.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    // Analytic multiplier: 1 at DC (and Nyquist when n is even), 2 on
    // positive frequencies, 0 on negative ones.
    let half = n / 2;
    if n % 2 == 0 {
        for v in buf.iter_mut().take(half).skip(1) {
            *v *= 2.0;
        }
        for v in buf.iter_mut().skip(half + 1) {
            *v = Complex::new(0.0, 0.0);
        }
    } else {
        for v in buf.iter_mut().take(half + 1).skip(1) {
            *v *= 2.0;
        }
        for v in buf.iter_mut().skip(half + 1) {
            *v = Complex::new(0.0, 0.0);
        }
    }
    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| c.im * scale).collect()
}

/// Builds a frame from raw RF, deriving the envelope and imaginary analytic
/// part column by column (along the axial axis).
pub fn frame_from_rf(grid: GridSpec, rf: Vec<f64>) -> Result<UsFrame> {
    if rf.len() != grid.len() {
        return Err(ElastoError::ShapeMismatch {
            got: rf.len(),
            channels: 1,
            height: grid.height,
            width: grid.width,
        });
    }
    let (h, w) = (grid.height, grid.width);
    if h < MIN_SIGNAL_LEN {
        return Err(ElastoError::TooShortInput { len: h, min: MIN_SIGNAL_LEN });
    }
    let columns: Vec<Vec<f64>> = map_indexed(w, |l| {
        let mut planner = FftPlanner::new();
        let col: Vec<f64> = (0..h).map(|a| rf[a * w + l]).collect();
        hilbert_with_planner(&col, &mut planner)
    });
    let mut imag = vec![0.0; h * w];
    for (l, col) in columns.iter().enumerate() {
        for a in 0..h {
            imag[a * w + l] = col[a];
        }
    }
    let env: Vec<f64> = rf
        .iter()
        .zip(imag.iter())
        .map(|(&r, &i)| r.hypot(i))
        .collect();
    UsFrame::from_channels(grid, rf, env, imag)
}

/// Separable pulse-echo point-spread function: a Gaussian-windowed cosine
/// along the axial axis and a plain Gaussian laterally. Profiles are
/// truncated at +/-3 sigma and max-normalized to 1.
#[derive(Clone, Debug)]
pub struct PsfKernel {
    pub axial: Vec<f64>,
    pub lateral: Vec<f64>,
}

impl PsfKernel {
    /// Center index of the axial profile.
    pub fn axial_center(&self) -> usize {
        self.axial.len() / 2
    }

    pub fn lateral_center(&self) -> usize {
        self.lateral.len() / 2
    }
}

pub fn psf_kernel(f0_over_fs: f64, sigma_ax: f64, sigma_lat: f64) -> Result<PsfKernel> {
    if !(f0_over_fs > 0.0 && f0_over_fs < 0.5) {
        return Err(ElastoError::FrequencyOutOfRange { f0_over_fs });
    }
    if !(sigma_ax > 0.0) || !(sigma_lat > 0.0) {
        return Err(ElastoError::InvalidConfig(format!(
            "PSF sigmas must be positive: sigma_ax={sigma_ax}, sigma_lat={sigma_lat}"
        )));
    }
    let half_ax = (3.0 * sigma_ax).ceil() as i64;
    let mut axial: Vec<f64> = (-half_ax..=half_ax)
        .map(|n| {
            let x = n as f64;
            (-0.5 * (x / sigma_ax).powi(2)).exp()
                * (2.0 * std::f64::consts::PI * f0_over_fs * x).cos()
        })
        .collect();
    let max_ax = axial.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in &mut axial {
        *v /= max_ax;
    }
    let half_lat = (3.0 * sigma_lat).ceil() as i64;
    let mut lateral: Vec<f64> = (-half_lat..=half_lat)
        .map(|n| (-0.5 * (n as f64 / sigma_lat).powi(2)).exp())
        .collect();
    let max_lat = lateral.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in &mut lateral {
        *v /= max_lat;
    }
    Ok(PsfKernel { axial, lateral })
}

/// Adds zero-mean Gaussian noise to the RF channel at the requested SNR and
/// re-derives the envelope and imaginary channels from the noisy RF.
/// `snr_db = f64::INFINITY` is the no-noise sentinel: the input is returned
/// unchanged.
pub fn add_noise(frame: &UsFrame, snr_db: f64, rng: &mut SeededRng) -> Result<UsFrame> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(frame.clone());
    }
    let rf = frame.rf();
    let n = rf.len() as f64;
    let mean = rf.iter().sum::<f64>() / n;
    let var = rf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let noise_std = (var / 10f64.powf(snr_db / 10.0)).sqrt();
    let noisy: Vec<f64> = rf
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + noise_std * z
        })
        .collect();
    frame_from_rf(*frame.grid(), noisy)
}

/// Where noise is injected relative to the frame pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTarget {
    Both,
    Pre,
    Post,
}

impl Default for NoiseTarget {
    fn default() -> Self {
        NoiseTarget::Both
    }
}

impl std::str::FromStr for NoiseTarget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "both" => Ok(NoiseTarget::Both),
            "pre" => Ok(NoiseTarget::Pre),
            "post" => Ok(NoiseTarget::Post),
            other => Err(format!("unknown noise target `{other}` (both|pre|post)")),
        }
    }
}

/// Applies [`add_noise`] to one or both frames of a pair.
pub fn add_noise_pair(
    pre: &UsFrame,
    post: &UsFrame,
    snr_db: f64,
    target: NoiseTarget,
    rng: &mut SeededRng,
) -> Result<(UsFrame, UsFrame)> {
    let pre_out = match target {
        NoiseTarget::Both | NoiseTarget::Pre => add_noise(pre, snr_db, rng)?,
        NoiseTarget::Post => pre.clone(),
    };
    let post_out = match target {
        NoiseTarget::Both | NoiseTarget::Post => add_noise(post, snr_db, rng)?,
        NoiseTarget::Pre => post.clone(),
    };
    Ok((pre_out, post_out))
}

/// Empirical SNR in dB of `noisy` against the clean `reference`.
pub fn empirical_snr_db(reference: &[f64], noisy: &[f64]) -> f64 {
    let n = reference.len() as f64;
    let mean = reference.iter().sum::<f64>() / n;
    let sig_var = reference.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let noise_var = reference
        .iter()
        .zip(noisy.iter())
        .map(|(&r, &y)| (y - r) * (y - r))
        .sum::<f64>()
        / n;
    10.0 * (sig_var / noise_var).log10()
}

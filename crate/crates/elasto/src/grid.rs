//! Physical grids, multi-channel fields, RF frames and displacement fields.
//!
//! Index convention: the axial index `a` is the first (row) axis, the
//! lateral index `l` the second. Displacements are stored in sample units;
//! unit conversions to mm happen where strains are computed. Fields hold
//! `f64` in memory; the on-disk format is 32-bit (see [`crate::io`]).

use serde::{Deserialize, Serialize};

use crate::error::{ElastoError, Result};

/// Regular 2D acquisition grid: sample counts and physical pitches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Axial sample count (rows).
    pub height: usize,
    /// Lateral line count (columns).
    pub width: usize,
    /// Axial sample pitch in mm.
    pub dz_mm: f64,
    /// Lateral line pitch in mm.
    pub dx_mm: f64,
}

pub const MIN_DIM: usize = 8;

impl GridSpec {
    pub fn new(height: usize, width: usize, dz_mm: f64, dx_mm: f64) -> Result<Self> {
        if height < MIN_DIM || width < MIN_DIM {
            return Err(ElastoError::DimensionTooSmall { height, width });
        }
        if !(dz_mm > 0.0) || !(dx_mm > 0.0) || !dz_mm.is_finite() || !dx_mm.is_finite() {
            return Err(ElastoError::NonPositivePitch { dz: dz_mm, dx: dx_mm });
        }
        Ok(Self { height, width, dz_mm, dx_mm })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lateral-to-axial pitch ratio dx/dz.
    #[inline]
    pub fn aspect(&self) -> f64 {
        self.dx_mm / self.dz_mm
    }

    /// Physical extent (axial mm, lateral mm).
    pub fn extent_mm(&self) -> (f64, f64) {
        (self.height as f64 * self.dz_mm, self.width as f64 * self.dx_mm)
    }

    pub(crate) fn require_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(ElastoError::GridMismatch(format!(
                "{what}: {}x{} ({} x {} mm) vs {}x{} ({} x {} mm)",
                self.height, self.width, self.dz_mm, self.dx_mm,
                other.height, other.width, other.dz_mm, other.dx_mm
            )))
        }
    }
}

/// Validated grid constructor.
pub fn make_grid(height: usize, width: usize, dz_mm: f64, dx_mm: f64) -> Result<GridSpec> {
    GridSpec::new(height, width, dz_mm, dx_mm)
}

/// Dense multi-channel field on a grid, indexed (channel, a, l) in C order.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    grid: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl Field2D {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        Self { grid, channels, data: vec![0.0; channels * grid.len()] }
    }

    /// Builds a field from raw data, checking shape and finiteness.
    pub fn from_vec(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * grid.len() {
            return Err(ElastoError::ShapeMismatch {
                got: data.len(),
                channels,
                height: grid.height,
                width: grid.width,
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(ElastoError::NonFinite { index });
        }
        Ok(Self { grid, channels, data })
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn idx(&self, c: usize, a: usize, l: usize) -> usize {
        (c * self.grid.height + a) * self.grid.width + l
    }

    #[inline]
    pub fn get(&self, c: usize, a: usize, l: usize) -> f64 {
        self.data[self.idx(c, a, l)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, a: usize, l: usize, v: f64) {
        let i = self.idx(c, a, l);
        self.data[i] = v;
    }

    /// One channel as a contiguous (a, l) slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Channel order of a [`UsFrame`]'s backing field.
pub const CH_RF: usize = 0;
pub const CH_ENV: usize = 1;
pub const CH_IMAG: usize = 2;

/// Three-channel ultrasound frame: RF, envelope, imaginary analytic part.
///
/// Constructed either from raw RF (see [`crate::signal::frame_from_rf`]) or
/// from three explicit channels, in which case the envelope identity
/// env^2 = rf^2 + imag^2 is verified to a relative tolerance of 1e-6.
#[derive(Clone, Debug, PartialEq)]
pub struct UsFrame {
    field: Field2D,
}

impl UsFrame {
    pub fn from_channels(grid: GridSpec, rf: Vec<f64>, env: Vec<f64>, imag: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if rf.len() != n || env.len() != n || imag.len() != n {
            return Err(ElastoError::ShapeMismatch {
                got: rf.len().min(env.len()).min(imag.len()),
                channels: 1,
                height: grid.height,
                width: grid.width,
            });
        }
        for i in 0..n {
            let env_sq = env[i] * env[i];
            let sum_sq = rf[i] * rf[i] + imag[i] * imag[i];
            let scale = env_sq.max(sum_sq);
            if (env_sq - sum_sq).abs() > 1e-6 * scale {
                return Err(ElastoError::EnvelopeIdentity { index: i, env_sq, sum_sq });
            }
        }
        let mut data = rf;
        data.extend_from_slice(&env);
        data.extend_from_slice(&imag);
        let field = Field2D::from_vec(grid, 3, data)?;
        Ok(Self { field })
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        self.field.grid()
    }

    pub fn rf(&self) -> &[f64] {
        self.field.channel(CH_RF)
    }

    pub fn env(&self) -> &[f64] {
        self.field.channel(CH_ENV)
    }

    pub fn imag(&self) -> &[f64] {
        self.field.channel(CH_IMAG)
    }

    /// The backing three-channel field.
    pub fn as_field(&self) -> &Field2D {
        &self.field
    }

    pub fn into_field(self) -> Field2D {
        self.field
    }
}

/// Two-component displacement map in sample units.
///
/// `w1` is axial displacement in axial samples, `w2` lateral displacement
/// in lateral lines, both defined at every grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct DispField {
    grid: GridSpec,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl DispField {
    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        Self { grid, w1: vec![0.0; n], w2: vec![0.0; n] }
    }

    pub fn from_components(grid: GridSpec, w1: Vec<f64>, w2: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if w1.len() != n || w2.len() != n {
            return Err(ElastoError::ShapeMismatch {
                got: w1.len().min(w2.len()),
                channels: 1,
                height: grid.height,
                width: grid.width,
            });
        }
        for (i, v) in w1.iter().chain(w2.iter()).enumerate() {
            if !v.is_finite() {
                return Err(ElastoError::NonFinite { index: i });
            }
        }
        Ok(Self { grid, w1, w2 })
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Axial component, sample units.
    pub fn axial(&self) -> &[f64] {
        &self.w1
    }

    /// Lateral component, line units.
    pub fn lateral(&self) -> &[f64] {
        &self.w2
    }

    pub fn to_field(&self) -> Field2D {
        let mut data = self.w1.clone();
        data.extend_from_slice(&self.w2);
        Field2D::from_vec(self.grid, 2, data).expect("components already validated")
    }

    pub fn from_field(field: &Field2D) -> Result<Self> {
        if field.channels() != 2 {
            return Err(ElastoError::ShapeMismatch {
                got: field.channels(),
                channels: 2,
                height: field.grid().height,
                width: field.grid().width,
            });
        }
        Self::from_components(*field.grid(), field.channel(0).to_vec(), field.channel(1).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn representative_rf_grid_is_valid() {
        let g = make_grid(2048, 256, 0.019, 0.15).unwrap();
        assert_eq!(g.height, 2048);
        assert!((g.aspect() - 0.15 / 0.019).abs() < 1e-12);
    }

    #[test]
    fn minimum_size_grid_is_valid() {
        assert!(make_grid(8, 8, 1.0, 1.0).is_ok());
    }

    #[test]
    fn too_small_grid_is_rejected() {
        match make_grid(4, 8, 1.0, 1.0) {
            Err(ElastoError::DimensionTooSmall { height: 4, width: 8 }) => {}
            other => panic!("expected DimensionTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_pitch_is_rejected() {
        assert!(make_grid(16, 16, 0.0, 1.0).is_err());
        assert!(make_grid(16, 16, 1.0, -0.5).is_err());
        assert!(make_grid(16, 16, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn field_shape_and_indexing() {
        let g = make_grid(8, 9, 1.0, 1.0).unwrap();
        let mut f = Field2D::zeros(g, 2);
        f.set(1, 3, 4, 7.5);
        assert_eq!(f.get(1, 3, 4), 7.5);
        assert_eq!(f.get(0, 3, 4), 0.0);
        assert_eq!(f.channel(1)[3 * 9 + 4], 7.5);
    }

    #[test]
    fn field_rejects_non_finite() {
        let g = make_grid(8, 8, 1.0, 1.0).unwrap();
        let mut data = vec![0.0; 64];
        data[10] = f64::NAN;
        assert!(matches!(
            Field2D::from_vec(g, 1, data),
            Err(ElastoError::NonFinite { index: 10 })
        ));
    }

    #[test]
    fn frame_envelope_identity_enforced() {
        let g = make_grid(8, 8, 1.0, 1.0).unwrap();
        let rf = vec![3.0; 64];
        let imag = vec![4.0; 64];
        let env = vec![5.0; 64];
        assert!(UsFrame::from_channels(g, rf.clone(), env, imag.clone()).is_ok());
        let bad_env = vec![5.1; 64];
        assert!(UsFrame::from_channels(g, rf, bad_env, imag).is_err());
    }
}

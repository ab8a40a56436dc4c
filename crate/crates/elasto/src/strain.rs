//! Strain tensors from displacement fields and the smoothness losses.
//!
//! Derivatives use central differences in the interior and one-sided
//! differences on the edges, in index space, then convert to physical,
//! dimensionless strain: displacement components are scaled to mm by the
//! grid pitch of their own axis and differentiated against the physical
//! coordinate of the derivative axis. For the diagonal components the
//! pitch cancels; the cross terms pick up pitch ratios.

use serde::{Deserialize, Serialize};

use crate::error::{ElastoError, Result};
use crate::grid::{DispField, Field2D, GridSpec};
use crate::util::{l1_delta, mean, smooth_abs_grad};

/// The four in-plane strain components, dimensionless.
#[derive(Clone, Debug, PartialEq)]
pub struct StrainField {
    grid: GridSpec,
    pub e11: Vec<f64>,
    pub e12: Vec<f64>,
    pub e21: Vec<f64>,
    pub e22: Vec<f64>,
}

impl StrainField {
    pub fn new(grid: GridSpec, e11: Vec<f64>, e12: Vec<f64>, e21: Vec<f64>, e22: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        for (name, c) in [("e11", &e11), ("e12", &e12), ("e21", &e21), ("e22", &e22)] {
            if c.len() != n {
                return Err(ElastoError::ShapeMismatch {
                    got: c.len(),
                    channels: 1,
                    height: grid.height,
                    width: grid.width,
                });
            }
            if let Some(index) = c.iter().position(|v| !v.is_finite()) {
                return Err(ElastoError::InvalidConfig(format!(
                    "non-finite {name} at index {index}"
                )));
            }
        }
        Ok(Self { grid, e11, e12, e21, e22 })
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn to_field(&self) -> Field2D {
        let mut data = self.e11.clone();
        data.extend_from_slice(&self.e12);
        data.extend_from_slice(&self.e21);
        data.extend_from_slice(&self.e22);
        Field2D::from_vec(self.grid, 4, data).expect("components already validated")
    }

    pub fn from_field(field: &Field2D) -> Result<Self> {
        if field.channels() != 4 {
            return Err(ElastoError::ShapeMismatch {
                got: field.channels(),
                channels: 4,
                height: field.grid().height,
                width: field.grid().width,
            });
        }
        Self::new(
            *field.grid(),
            field.channel(0).to_vec(),
            field.channel(1).to_vec(),
            field.channel(2).to_vec(),
            field.channel(3).to_vec(),
        )
    }
}

/// Weights of the smoothness loss: `beta` scales lateral-derivative terms,
/// `gamma` the second-order part.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SmoothWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SmoothWeights {
    fn default() -> Self {
        Self { beta: 0.1, gamma: 1.0 }
    }
}

impl SmoothWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(ElastoError::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.gamma < 0.0 {
            return Err(ElastoError::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Index-space derivative along the axial (row) axis: central in the
/// interior, one-sided at the first and last row.
pub(crate) fn d_axial(src: &[f64], h: usize, w: usize, out: &mut [f64]) {
    debug_assert_eq!(src.len(), h * w);
    for l in 0..w {
        out[l] = src[w + l] - src[l];
        out[(h - 1) * w + l] = src[(h - 1) * w + l] - src[(h - 2) * w + l];
    }
    for a in 1..h - 1 {
        for l in 0..w {
            out[a * w + l] = 0.5 * (src[(a + 1) * w + l] - src[(a - 1) * w + l]);
        }
    }
}

/// Adjoint of [`d_axial`]: accumulates into `acc`.
pub(crate) fn d_axial_adjoint(g: &[f64], h: usize, w: usize, acc: &mut [f64]) {
    for l in 0..w {
        acc[w + l] += g[l];
        acc[l] -= g[l];
        acc[(h - 1) * w + l] += g[(h - 1) * w + l];
        acc[(h - 2) * w + l] -= g[(h - 1) * w + l];
    }
    for a in 1..h - 1 {
        for l in 0..w {
            let v = 0.5 * g[a * w + l];
            acc[(a + 1) * w + l] += v;
            acc[(a - 1) * w + l] -= v;
        }
    }
}

/// Index-space derivative along the lateral (column) axis.
pub(crate) fn d_lateral(src: &[f64], h: usize, w: usize, out: &mut [f64]) {
    debug_assert_eq!(src.len(), h * w);
    for a in 0..h {
        let row = a * w;
        out[row] = src[row + 1] - src[row];
        out[row + w - 1] = src[row + w - 1] - src[row + w - 2];
        for l in 1..w - 1 {
            out[row + l] = 0.5 * (src[row + l + 1] - src[row + l - 1]);
        }
    }
}

/// Adjoint of [`d_lateral`]: accumulates into `acc`.
pub(crate) fn d_lateral_adjoint(g: &[f64], h: usize, w: usize, acc: &mut [f64]) {
    for a in 0..h {
        let row = a * w;
        acc[row + 1] += g[row];
        acc[row] -= g[row];
        acc[row + w - 1] += g[row + w - 1];
        acc[row + w - 2] -= g[row + w - 1];
        for l in 1..w - 1 {
            let v = 0.5 * g[row + l];
            acc[row + l + 1] += v;
            acc[row + l - 1] -= v;
        }
    }
}

/// Strain tensor of a displacement field.
pub fn compute_strain(disp: &DispField) -> StrainField {
    compute_strain_parts(*disp.grid(), disp.axial(), disp.lateral())
}

/// Strain tensor from raw displacement component slices.
pub(crate) fn compute_strain_parts(grid: GridSpec, w1: &[f64], w2: &[f64]) -> StrainField {
    let (h, w) = (grid.height, grid.width);
    let n = grid.len();
    let mut e11 = vec![0.0; n];
    let mut e12 = vec![0.0; n];
    let mut e21 = vec![0.0; n];
    let mut e22 = vec![0.0; n];
    d_axial(w1, h, w, &mut e11);
    d_lateral(w1, h, w, &mut e12);
    d_axial(w2, h, w, &mut e21);
    d_lateral(w2, h, w, &mut e22);
    // Physical scaling: d(W1*dz)/d(l*dx) etc. The diagonal terms cancel.
    let rza = grid.dz_mm / grid.dx_mm;
    let rxz = grid.dx_mm / grid.dz_mm;
    for v in &mut e12 {
        *v *= rza;
    }
    for v in &mut e21 {
        *v *= rxz;
    }
    StrainField::new(grid, e11, e12, e21, e22).expect("derivatives of finite fields are finite")
}

/// Scatters a strain-space gradient back to displacement space
/// (the exact adjoint of [`compute_strain`]).
pub(crate) fn strain_adjoint(
    grid: &GridSpec,
    g11: &[f64],
    g12: &[f64],
    g21: &[f64],
    g22: &[f64],
    gw1: &mut [f64],
    gw2: &mut [f64],
) {
    let (h, w) = (grid.height, grid.width);
    let rza = grid.dz_mm / grid.dx_mm;
    let rxz = grid.dx_mm / grid.dz_mm;
    d_axial_adjoint(g11, h, w, gw1);
    let g12s: Vec<f64> = g12.iter().map(|v| v * rza).collect();
    d_lateral_adjoint(&g12s, h, w, gw1);
    let g21s: Vec<f64> = g21.iter().map(|v| v * rxz).collect();
    d_axial_adjoint(&g21s, h, w, gw2);
    d_lateral_adjoint(g22, h, w, gw2);
}

/// First- and second-order smoothness losses.
///
/// `ls1` penalizes the deviation of the axial strain from its mean and the
/// magnitudes of the remaining components; `ls2` penalizes physical-spacing
/// first derivatives of the diagonal strains. Norms reduce as means over
/// pixels so the weights are grid-size independent. Returns
/// `(ls1, ls2, ls1 + gamma * ls2)`.
pub fn smoothness_loss(strain: &StrainField, w: &SmoothWeights) -> (f64, f64, f64) {
    let terms = smoothness_terms(strain);
    let ls1 = terms.ls1(w.beta);
    let ls2 = terms.ls2(w.beta);
    (ls1, ls2, ls1 + w.gamma * ls2)
}

/// Intermediate arrays of the smoothness loss, shared by the value and
/// gradient paths.
pub(crate) struct SmoothnessTerms {
    pub dev11: Vec<f64>,
    pub d11a: Vec<f64>,
    pub d11l: Vec<f64>,
    pub d22a: Vec<f64>,
    pub d22l: Vec<f64>,
    pub e12_abs_mean: f64,
    pub e21_abs_mean: f64,
    pub e22_abs_mean: f64,
}

impl SmoothnessTerms {
    pub fn ls1(&self, beta: f64) -> f64 {
        mean_abs(&self.dev11) + beta * self.e12_abs_mean + 0.5 * self.e21_abs_mean
            + 0.5 * beta * self.e22_abs_mean
    }

    pub fn ls2(&self, beta: f64) -> f64 {
        mean_abs(&self.d11a) + beta * mean_abs(&self.d11l) + 0.5 * mean_abs(&self.d22a)
            + 0.5 * beta * mean_abs(&self.d22l)
    }
}

fn mean_abs(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|v| v.abs()).sum::<f64>() / xs.len() as f64
}

pub(crate) fn smoothness_terms(strain: &StrainField) -> SmoothnessTerms {
    let grid = strain.grid();
    let (h, w) = (grid.height, grid.width);
    let n = grid.len();
    let mu = mean(&strain.e11);
    let dev11: Vec<f64> = strain.e11.iter().map(|v| v - mu).collect();
    let mut d11a = vec![0.0; n];
    let mut d11l = vec![0.0; n];
    let mut d22a = vec![0.0; n];
    let mut d22l = vec![0.0; n];
    d_axial(&strain.e11, h, w, &mut d11a);
    d_lateral(&strain.e11, h, w, &mut d11l);
    d_axial(&strain.e22, h, w, &mut d22a);
    d_lateral(&strain.e22, h, w, &mut d22l);
    let (idz, idx) = (1.0 / grid.dz_mm, 1.0 / grid.dx_mm);
    for v in &mut d11a {
        *v *= idz;
    }
    for v in &mut d22a {
        *v *= idz;
    }
    for v in &mut d11l {
        *v *= idx;
    }
    for v in &mut d22l {
        *v *= idx;
    }
    SmoothnessTerms {
        dev11,
        d11a,
        d11l,
        d22a,
        d22l,
        e12_abs_mean: mean_abs(&strain.e12),
        e21_abs_mean: mean_abs(&strain.e21),
        e22_abs_mean: mean_abs(&strain.e22),
    }
}

/// Gradient of `ls1 + gamma * ls2` with respect to the strain components,
/// using the smoothed L1 derivative.
pub(crate) fn smoothness_grad_wrt_strain(
    strain: &StrainField,
    w: &SmoothWeights,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let grid = strain.grid();
    let (h, wd) = (grid.height, grid.width);
    let n = grid.len();
    let inv_n = 1.0 / n as f64;
    let terms = smoothness_terms(strain);

    // ls1, e11 part: d/de11_i mean|e11 - mu| = (phi'(dev_i) - mean_j phi'(dev_j)) / n
    let delta_dev = l1_delta(&terms.dev11);
    let signs: Vec<f64> = terms.dev11.iter().map(|&x| smooth_abs_grad(x, delta_dev)).collect();
    let sign_mean = mean(&signs);
    let mut g11: Vec<f64> = signs.iter().map(|s| (s - sign_mean) * inv_n).collect();

    let d12 = l1_delta(&strain.e12);
    let g12: Vec<f64> = strain
        .e12
        .iter()
        .map(|&x| w.beta * smooth_abs_grad(x, d12) * inv_n)
        .collect();
    let d21 = l1_delta(&strain.e21);
    let g21: Vec<f64> = strain
        .e21
        .iter()
        .map(|&x| 0.5 * smooth_abs_grad(x, d21) * inv_n)
        .collect();
    let d22 = l1_delta(&strain.e22);
    let mut g22: Vec<f64> = strain
        .e22
        .iter()
        .map(|&x| 0.5 * w.beta * smooth_abs_grad(x, d22) * inv_n)
        .collect();

    // ls2: derivative terms chain back through the difference stencils.
    if w.gamma > 0.0 {
        let (idz, idx) = (1.0 / grid.dz_mm, 1.0 / grid.dx_mm);
        let dd11a = l1_delta(&terms.d11a);
        let s11a: Vec<f64> = terms
            .d11a
            .iter()
            .map(|&x| w.gamma * smooth_abs_grad(x, dd11a) * inv_n * idz)
            .collect();
        d_axial_adjoint(&s11a, h, wd, &mut g11);
        let dd11l = l1_delta(&terms.d11l);
        let s11l: Vec<f64> = terms
            .d11l
            .iter()
            .map(|&x| w.gamma * w.beta * smooth_abs_grad(x, dd11l) * inv_n * idx)
            .collect();
        d_lateral_adjoint(&s11l, h, wd, &mut g11);
        let dd22a = l1_delta(&terms.d22a);
        let s22a: Vec<f64> = terms
            .d22a
            .iter()
            .map(|&x| w.gamma * 0.5 * smooth_abs_grad(x, dd22a) * inv_n * idz)
            .collect();
        d_axial_adjoint(&s22a, h, wd, &mut g22);
        let dd22l = l1_delta(&terms.d22l);
        let s22l: Vec<f64> = terms
            .d22l
            .iter()
            .map(|&x| w.gamma * 0.5 * w.beta * smooth_abs_grad(x, dd22l) * inv_n * idx)
            .collect();
        d_lateral_adjoint(&s22l, h, wd, &mut g22);
    }

    (g11, g12, g21, g22)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn disp_from_fn(
        grid: GridSpec,
        f1: impl Fn(f64, f64) -> f64,
        f2: impl Fn(f64, f64) -> f64,
    ) -> DispField {
        let (h, w) = (grid.height, grid.width);
        let mut w1 = vec![0.0; h * w];
        let mut w2 = vec![0.0; h * w];
        for a in 0..h {
            for l in 0..w {
                w1[a * w + l] = f1(a as f64, l as f64);
                w2[a * w + l] = f2(a as f64, l as f64);
            }
        }
        DispField::from_components(grid, w1, w2).unwrap()
    }

    #[test]
    fn linear_axial_ramp() {
        let grid = make_grid(16, 12, 0.7, 1.3).unwrap();
        let disp = disp_from_fn(grid, |a, _| 0.1 * a, |_, _| 0.0);
        let s = compute_strain(&disp);
        for v in &s.e11 {
            assert_abs_diff_eq!(*v, 0.1, epsilon = 1e-12);
        }
        for v in s.e12.iter().chain(&s.e21).chain(&s.e22) {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_both_components() {
        let grid = make_grid(16, 12, 1.0, 1.0).unwrap();
        let disp = disp_from_fn(grid, |a, _| 0.1 * a, |_, l| -0.035 * l);
        let s = compute_strain(&disp);
        for v in &s.e11 {
            assert_abs_diff_eq!(*v, 0.1, epsilon = 1e-12);
        }
        for v in &s.e22 {
            assert_abs_diff_eq!(*v, -0.035, epsilon = 1e-12);
        }
    }

    #[test]
    fn polynomial_field_matches_symbolic_derivative() {
        // W1 = 0.02 a^2/H + 0.3 a, W2 = 0.01 l^2/W - 0.2 l with dz=dx=1:
        // e11 = 0.04 a/H + 0.3, e22 = 0.02 l/W - 0.2 (exact for quadratics
        // under central differences; edges are one-sided, hence interior only).
        let grid = make_grid(16, 16, 1.0, 1.0).unwrap();
        let (h, w) = (16.0, 16.0);
        let disp = disp_from_fn(
            grid,
            |a, _| 0.02 * a * a / h + 0.3 * a,
            |_, l| 0.01 * l * l / w - 0.2 * l,
        );
        let s = compute_strain(&disp);
        for a in 1..15 {
            for l in 1..15 {
                let i = a * 16 + l;
                let want11 = 0.04 * a as f64 / h + 0.3;
                let want22 = 0.02 * l as f64 / w - 0.2;
                assert!((s.e11[i] - want11).abs() <= 1e-3 * want11.abs());
                assert!((s.e22[i] - want22).abs() <= 1e-3 * want22.abs());
            }
        }
    }

    #[test]
    fn cross_terms_scale_with_pitch_ratio() {
        let grid = make_grid(16, 12, 0.5, 2.0).unwrap();
        let disp = disp_from_fn(grid, |_, l| 0.2 * l, |a, _| 0.1 * a);
        let s = compute_strain(&disp);
        // e12 = dz/dx * dW1/dl = 0.25 * 0.2, e21 = dx/dz * dW2/da = 4 * 0.1
        for v in &s.e12 {
            assert_abs_diff_eq!(*v, 0.05, epsilon = 1e-12);
        }
        for v in &s.e21 {
            assert_abs_diff_eq!(*v, 0.4, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_strain_has_zero_smoothness() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        let n = grid.len();
        let s = StrainField::new(grid, vec![0.42; n], vec![0.0; n], vec![0.0; n], vec![0.0; n])
            .unwrap();
        let (ls1, ls2, ls) = smoothness_loss(&s, &SmoothWeights { beta: 0.1, gamma: 1.0 });
        // The mean subtraction leaves only summation round-off.
        assert_abs_diff_eq!(ls1, 0.0, epsilon = 1e-15);
        assert_eq!(ls2, 0.0);
        assert_abs_diff_eq!(ls, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn all_zero_strain_is_zero() {
        let grid = make_grid(8, 8, 1.0, 1.0).unwrap();
        let n = grid.len();
        let s = StrainField::new(grid, vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n])
            .unwrap();
        assert_eq!(smoothness_loss(&s, &SmoothWeights::default()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn axial_ramp_smoothness_closed_form() {
        // e11(a) = s * (a * dz): physical-spacing derivative is exactly s
        // everywhere; ls1's first term is the mean absolute deviation of the
        // ramp, computable in closed form.
        let grid = make_grid(16, 8, 0.5, 1.0).unwrap();
        let (h, w) = (grid.height, grid.width);
        let slope = 0.01;
        let n = grid.len();
        let mut e11 = vec![0.0; n];
        for a in 0..h {
            for l in 0..w {
                e11[a * w + l] = slope * (a as f64 * grid.dz_mm);
            }
        }
        let s = StrainField::new(grid, e11.clone(), vec![0.0; n], vec![0.0; n], vec![0.0; n])
            .unwrap();
        let (ls1, ls2, ls) = smoothness_loss(&s, &SmoothWeights { beta: 0.1, gamma: 1.0 });
        assert_abs_diff_eq!(ls2, slope, epsilon = 1e-12);
        let mu = mean(&e11);
        let want_ls1 = e11.iter().map(|v| (v - mu).abs()).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(ls1, want_ls1, epsilon = 1e-12);
        assert_abs_diff_eq!(ls, ls1 + ls2, epsilon = 1e-15);
    }

    #[test]
    fn ls_invariant_to_constant_e11_shift() {
        let grid = make_grid(12, 10, 0.8, 1.1).unwrap();
        let n = grid.len();
        let mut rng = crate::rng::seeded_rng(11);
        let e11: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let e12: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let e21: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let e22: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let w = SmoothWeights { beta: 0.1, gamma: 0.7 };
        let base = smoothness_loss(
            &StrainField::new(grid, e11.clone(), e12.clone(), e21.clone(), e22.clone()).unwrap(),
            &w,
        );
        let shifted: Vec<f64> = e11.iter().map(|v| v + 3.21).collect();
        let with_shift =
            smoothness_loss(&StrainField::new(grid, shifted, e12, e21, e22).unwrap(), &w);
        assert!((base.0 - with_shift.0).abs() <= 1e-9 * base.0.abs().max(1e-12));
        assert!((base.1 - with_shift.1).abs() <= 1e-9 * base.1.abs().max(1e-12));
    }

    #[test]
    fn ls_non_decreasing_in_gamma() {
        let grid = make_grid(12, 10, 1.0, 1.0).unwrap();
        let n = grid.len();
        let mut rng = crate::rng::seeded_rng(4);
        let mk = |rng: &mut crate::rng::SeededRng| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-0.1..0.1)).collect()
        };
        let s = StrainField::new(grid, mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng))
            .unwrap();
        let mut prev = f64::NEG_INFINITY;
        for gamma in [0.0, 0.3, 1.0, 2.5] {
            let (_, _, ls) = smoothness_loss(&s, &SmoothWeights { beta: 0.1, gamma });
            assert!(ls >= prev);
            prev = ls;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn derivative_adjoints_are_exact(seed in 0u64..10_000) {
            // <D x, y> == <x, D^T y> for both axes.
            let mut rng = crate::rng::seeded_rng(seed);
            let (h, w) = (rng.random_range(8..20usize), rng.random_range(8..20usize));
            let n = h * w;
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for axis in 0..2 {
                let mut dx = vec![0.0; n];
                let mut dty = vec![0.0; n];
                if axis == 0 {
                    d_axial(&x, h, w, &mut dx);
                    d_axial_adjoint(&y, h, w, &mut dty);
                } else {
                    d_lateral(&x, h, w, &mut dx);
                    d_lateral_adjoint(&y, h, w, &mut dty);
                }
                let lhs: f64 = dx.iter().zip(&y).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.iter().zip(&dty).map(|(a, b)| a * b).sum();
                prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            }
        }
    }
}

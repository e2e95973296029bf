//! Covariance matrices for the spatial GP (Σ₀), the temporal GP (W) and the
//! EEG dipole variant.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expfam::not_pd;

/// Default diagonal jitter, relative to the kernel amplitude.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;

const MAX_JITTER_DOUBLINGS: usize = 6;

/// Voxel grid for dipole kernels. Signal component `3·v + a` is the moment of
/// voxel `v` along axis `a` (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleLayout {
    pub locations: Vec<[f64; 3]>,
    /// Multiplies the squared Euclidean distance before it enters the kernel.
    pub distance_scale: f64,
    /// Use the distance rule exactly as printed: cross-axis pairs get distance 0
    /// (hence maximal covariance) and same-axis pairs use the squared norm as the
    /// distance, which the kernel squares again.
    pub literal_distance: bool,
}

impl DipoleLayout {
    pub fn new(locations: Vec<[f64; 3]>) -> Self {
        Self {
            locations,
            distance_scale: 1.0,
            literal_distance: false,
        }
    }

    pub fn dim(&self) -> usize {
        3 * self.locations.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    SquaredExponential,
    Dipole(DipoleLayout),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub amplitude: f64,
    pub lengthscale: f64,
    /// Absolute diagonal jitter; `None` means `DEFAULT_RELATIVE_JITTER · amplitude`.
    pub jitter: Option<f64>,
}

impl KernelSpec {
    pub fn squared_exponential(amplitude: f64, lengthscale: f64) -> Self {
        Self {
            kind: KernelKind::SquaredExponential,
            amplitude,
            lengthscale,
            jitter: None,
        }
    }

    pub fn dipole(layout: DipoleLayout, amplitude: f64, lengthscale: f64) -> Self {
        Self {
            kind: KernelKind::Dipole(layout),
            amplitude,
            lengthscale,
            jitter: None,
        }
    }

    pub fn effective_jitter(&self) -> f64 {
        self.jitter
            .unwrap_or(DEFAULT_RELATIVE_JITTER * self.amplitude)
    }

    pub fn validate(&self) -> Result<()> {
        validate_params(self.amplitude, self.lengthscale, self.effective_jitter())
    }

    /// Builds the `n × n` covariance matrix. Dipole kernels require `n` to match
    /// their layout.
    pub fn build(&self, n: usize) -> Result<DMatrix<f64>> {
        let jitter = self.effective_jitter();
        match &self.kind {
            KernelKind::SquaredExponential => {
                build_se_kernel(n, self.amplitude, self.lengthscale, jitter)
            }
            KernelKind::Dipole(layout) => {
                if layout.dim() != n {
                    return Err(Error::DimensionMismatch {
                        context: "dipole kernel",
                        expected: n,
                        actual: layout.dim(),
                    });
                }
                build_dipole_kernel(layout, self.amplitude, self.lengthscale, jitter)
            }
        }
    }
}

fn validate_params(amplitude: f64, lengthscale: f64, jitter: f64) -> Result<()> {
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(Error::invalid("amplitude", format!("must be positive, got {amplitude}")));
    }
    if !(lengthscale > 0.0 && lengthscale.is_finite()) {
        return Err(Error::invalid(
            "lengthscale",
            format!("must be positive, got {lengthscale}"),
        ));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::invalid("jitter", format!("must be nonnegative, got {jitter}")));
    }
    Ok(())
}

/// `K(i, j) = α·exp(−(i − j)² / (2ℓ²))` over indices `0..n`, plus `jitter` on the diagonal.
pub fn build_se_kernel(n: usize, amplitude: f64, lengthscale: f64, jitter: f64) -> Result<DMatrix<f64>> {
    validate_params(amplitude, lengthscale, jitter)?;
    if n == 0 {
        return Err(Error::invalid("n", "kernel dimension must be at least 1"));
    }
    let denom = 2.0 * lengthscale * lengthscale;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let d = i as f64 - j as f64;
        let k = amplitude * (-d * d / denom).exp();
        if i == j {
            k + jitter
        } else {
            k
        }
    }))
}

/// Dipole covariance: collinear moments of nearby voxels are correlated,
/// moments along different axes are independent (see [`DipoleLayout`] for the
/// literal variant).
pub fn build_dipole_kernel(
    layout: &DipoleLayout,
    amplitude: f64,
    lengthscale: f64,
    jitter: f64,
) -> Result<DMatrix<f64>> {
    validate_params(amplitude, lengthscale, jitter)?;
    if layout.locations.is_empty() {
        return Err(Error::invalid("locations", "at least one voxel is required"));
    }
    if layout
        .locations
        .iter()
        .any(|loc| loc.iter().any(|c| !c.is_finite()))
    {
        return Err(Error::invalid("locations", "coordinates must be finite"));
    }
    if !(layout.distance_scale > 0.0 && layout.distance_scale.is_finite()) {
        return Err(Error::invalid("distance_scale", "must be positive"));
    }
    let n = layout.dim();
    let denom = 2.0 * lengthscale * lengthscale;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (vi, ai) = (i / 3, i % 3);
        let (vj, aj) = (j / 3, j % 3);
        let sq = squared_distance(&layout.locations[vi], &layout.locations[vj]) * layout.distance_scale;
        let k = if layout.literal_distance {
            let d = if ai != aj { 0.0 } else { sq };
            amplitude * (-d * d / denom).exp()
        } else if ai != aj {
            0.0
        } else {
            amplitude * (-sq / denom).exp()
        };
        if i == j {
            k + jitter
        } else {
            k
        }
    }))
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Returns `m + jitter·I`, doubling the jitter (up to six times) until a
/// Cholesky factorization succeeds.
pub fn ensure_psd(m: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "ensure_psd",
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    if !(jitter >= 0.0) {
        return Err(Error::invalid("jitter", "must be nonnegative"));
    }
    let n = m.nrows();
    let floor = 1e-12 * (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut current = jitter;
    for attempt in 0..=MAX_JITTER_DOUBLINGS {
        let mut candidate = m.clone();
        for i in 0..n {
            candidate[(i, i)] += current;
        }
        if candidate.clone().cholesky().is_some() {
            return Ok(candidate);
        }
        if attempt == MAX_JITTER_DOUBLINGS {
            return Err(not_pd(&candidate));
        }
        current = (2.0 * current).max(floor);
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    #[test]
    fn se_kernel_reference_entries() {
        let k = build_se_kernel(3, 1.0, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(k[(0, 1)], 0.606_530_659_712_633_4, epsilon = 1e-15);
        assert_abs_diff_eq!(k[(0, 2)], 0.135_335_283_236_612_7, epsilon = 1e-15);
        assert_eq!(k[(1, 1)], 1.0);
    }

    #[test]
    fn se_kernel_synthetic_profile() {
        let k = build_se_kernel(20, 10.0, 10.0, 0.0).unwrap();
        assert_abs_diff_eq!(k[(0, 10)], 6.065_306_597_126_334, epsilon = 1e-12);
        let jittered = build_se_kernel(20, 10.0, 10.0, 1e-5).unwrap();
        assert_eq!(jittered[(4, 4)], 10.0 + 1e-5);
    }

    #[test]
    fn se_kernel_decays_and_is_translation_invariant() {
        let k = build_se_kernel(60, 1.0, 2.0, 0.0).unwrap();
        assert!(k[(0, 59)] < 1e-100);
        for d in 0..10 {
            assert_eq!(k[(3, 3 + d)], k[(40, 40 + d)]);
            assert_eq!(k[(3 + d, 3)], k[(3, 3 + d)]);
        }
    }

    #[test]
    fn se_kernel_rejects_bad_parameters() {
        assert!(build_se_kernel(3, 0.0, 1.0, 0.0).is_err());
        assert!(build_se_kernel(3, 1.0, -1.0, 0.0).is_err());
        assert!(build_se_kernel(0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn se_kernel_factorizable_after_default_jitter() {
        let spec = KernelSpec::squared_exponential(10.0, 10.0);
        let k = spec.build(100).unwrap();
        assert!(k.cholesky().is_some());
    }

    #[test]
    fn dipole_kernel_axes() {
        let layout = DipoleLayout::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]);
        let (alpha, ell, jitter) = (0.05, 0.2217, 1e-8);
        let k = build_dipole_kernel(&layout, alpha, ell, jitter).unwrap();
        assert_eq!(k.nrows(), 6);
        assert_eq!(k[(0, 0)], alpha + jitter);
        assert_eq!(k[(0, 1)], 0.0);
        assert_eq!(k[(1, 2)], 0.0);
        let u: f64 = 0.1;
        let expected = alpha * (-u * u / (2.0 * ell * ell)).exp();
        assert_abs_diff_eq!(k[(0, 3)], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(k[(2, 5)], expected, epsilon = 1e-15);
        assert_eq!(k[(0, 4)], 0.0);
        assert!(k.cholesky().is_some());
    }

    #[test]
    fn dipole_literal_distance() {
        let mut layout = DipoleLayout::new(vec![[0.0, 0.0, 0.0], [0.3, 0.4, 0.0]]);
        layout.literal_distance = true;
        let k = build_dipole_kernel(&layout, 2.0, 1.0, 0.0).unwrap();
        assert_eq!(k[(0, 1)], 2.0);
        // squared norm 0.25 is the distance, squared again inside the kernel
        assert_abs_diff_eq!(k[(0, 3)], 2.0 * (-0.0625f64 / 2.0).exp(), epsilon = 1e-15);
    }

    #[test]
    fn dipole_rejects_malformed_layout() {
        assert!(build_dipole_kernel(&DipoleLayout::new(vec![]), 1.0, 1.0, 0.0).is_err());
        let bad = DipoleLayout::new(vec![[f64::NAN, 0.0, 0.0]]);
        assert!(build_dipole_kernel(&bad, 1.0, 1.0, 0.0).is_err());
        let spec = KernelSpec::dipole(DipoleLayout::new(vec![[0.0; 3]]), 1.0, 1.0);
        assert!(spec.build(4).is_err());
    }

    #[test]
    fn ensure_psd_examples() {
        let id = DMatrix::<f64>::identity(4, 4);
        assert_eq!(ensure_psd(&id, 0.0).unwrap(), id);

        let z = ensure_psd(&DMatrix::zeros(3, 3), 1e-6).unwrap();
        assert_eq!(z, DMatrix::identity(3, 3) * 1e-6);

        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let rank1 = &v * v.transpose();
        let m = ensure_psd(&rank1, 1e-6).unwrap();
        let eig = m.clone().symmetric_eigenvalues();
        assert!(eig.min() > 0.0);
        assert!(m.cholesky().is_some());
    }

    #[test]
    fn ensure_psd_reports_negative_eigenvalue() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -5.0]));
        match ensure_psd(&m, 1e-6) {
            Err(Error::NotPositiveDefinite { min_eigenvalue }) => assert!(min_eigenvalue < -4.0),
            other => panic!("expected failure, got {other:?}"),
        }
    }
}

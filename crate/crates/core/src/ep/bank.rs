//! Storage for families of per-timestamp factors, with or without a covariance
//! shared across timestamps.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::expfam::{symmetrize, GaussianNat};

/// Diagonal Gaussian factors, one per `(i, t)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum DiagBank {
    PerSlot { precision: DMatrix<f64>, shift: DMatrix<f64> },
    /// One precision per component; the per-timestamp content lives in the means.
    Shared { precision: DVector<f64>, mean: DMatrix<f64> },
}

impl DiagBank {
    pub fn new(n: usize, t_len: usize, precision: f64, shared: bool) -> Self {
        if shared {
            DiagBank::Shared {
                precision: DVector::from_element(n, precision),
                mean: DMatrix::zeros(n, t_len),
            }
        } else {
            DiagBank::PerSlot {
                precision: DMatrix::from_element(n, t_len, precision),
                shift: DMatrix::zeros(n, t_len),
            }
        }
    }

    pub fn precision(&self, i: usize, t: usize) -> f64 {
        match self {
            DiagBank::PerSlot { precision, .. } => precision[(i, t)],
            DiagBank::Shared { precision, .. } => precision[i],
        }
    }

    pub fn shift(&self, i: usize, t: usize) -> f64 {
        match self {
            DiagBank::PerSlot { shift, .. } => shift[(i, t)],
            DiagBank::Shared { precision, mean } => precision[i] * mean[(i, t)],
        }
    }

    pub fn n(&self) -> usize {
        match self {
            DiagBank::PerSlot { precision, .. } => precision.nrows(),
            DiagBank::Shared { precision, .. } => precision.len(),
        }
    }

    /// `(precision, shift)` vectors of the factor at `t`.
    pub fn natural(&self, t: usize) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        (
            DVector::from_fn(n, |i, _| self.precision(i, t)),
            DVector::from_fn(n, |i, _| self.shift(i, t)),
        )
    }

    /// Damped write of a new scalar factor with positive precision.
    pub fn write(&mut self, i: usize, t: usize, precision_new: f64, shift_new: f64, eta: f64) {
        let p = eta * precision_new + (1.0 - eta) * self.precision(i, t);
        let s = eta * shift_new + (1.0 - eta) * self.shift(i, t);
        match self {
            DiagBank::PerSlot { precision, shift } => {
                precision[(i, t)] = p;
                shift[(i, t)] = s;
            }
            DiagBank::Shared { precision, mean } => {
                precision[i] = p;
                mean[(i, t)] = s / p;
            }
        }
    }
}

/// Full Gaussian factors, one per slot.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum GaussBank {
    PerSlot(Vec<GaussianNat>),
    Shared { precision: DMatrix<f64>, means: Vec<DVector<f64>> },
}

impl GaussBank {
    pub fn vague(n: usize, slots: usize, shared: bool) -> Self {
        if shared {
            GaussBank::Shared {
                precision: DMatrix::zeros(n, n),
                means: vec![DVector::zeros(n); slots],
            }
        } else {
            GaussBank::PerSlot(vec![GaussianNat::vague(n); slots])
        }
    }

    pub fn precision(&self, slot: usize) -> &DMatrix<f64> {
        match self {
            GaussBank::PerSlot(v) => &v[slot].precision,
            GaussBank::Shared { precision, .. } => precision,
        }
    }

    pub fn shift(&self, slot: usize) -> DVector<f64> {
        match self {
            GaussBank::PerSlot(v) => v[slot].shift.clone(),
            GaussBank::Shared { precision, means } => precision * &means[slot],
        }
    }

    pub fn natural(&self, slot: usize) -> GaussianNat {
        GaussianNat {
            precision: self.precision(slot).clone(),
            shift: self.shift(slot),
        }
    }

    /// Adds slot's natural parameters into an accumulator.
    pub fn add_to(&self, slot: usize, precision: &mut DMatrix<f64>, shift: &mut DVector<f64>) {
        *precision += self.precision(slot);
        match self {
            GaussBank::PerSlot(v) => *shift += &v[slot].shift,
            GaussBank::Shared { precision: p, means } => shift.gemv(1.0, p, &means[slot], 1.0),
        }
    }

    pub fn write(&mut self, slot: usize, new: GaussianNat, eta: f64) -> Result<()> {
        let damped = if eta >= 1.0 {
            new
        } else {
            GaussianNat::damp(&new, &self.natural(slot), eta)?
        };
        match self {
            GaussBank::PerSlot(v) => v[slot] = damped,
            GaussBank::Shared { precision, means } => {
                means[slot] = solve_mean(&damped.precision, &damped.shift);
                *precision = damped.precision;
            }
        }
        Ok(())
    }

    /// Whether a slot is finite; a write changes nothing else.
    pub fn is_finite(&self, slot: usize) -> bool {
        match self {
            GaussBank::PerSlot(v) => v[slot].is_finite(),
            GaussBank::Shared { precision, means } => {
                precision.iter().all(|v| v.is_finite()) && means[slot].iter().all(|v| v.is_finite())
            }
        }
    }
}

/// `Λ⁻¹h`, or the minimum-norm solution when `Λ` is singular.
fn solve_mean(precision: &DMatrix<f64>, shift: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = precision.clone().cholesky() {
        return chol.solve(shift);
    }
    let scale = precision.amax();
    if scale == 0.0 {
        return DVector::zeros(shift.len());
    }
    let mut p = precision.clone();
    symmetrize(&mut p);
    p.svd(true, true)
        .solve(shift, 1e-12 * scale)
        .unwrap_or_else(|_| DVector::zeros(shift.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diag_shared_write_keeps_shift_consistent() {
        let mut b = DiagBank::new(2, 3, 0.0, true);
        b.write(1, 2, 4.0, 2.0, 1.0);
        assert_eq!(b.precision(1, 0), 4.0);
        assert_relative_eq!(b.shift(1, 2), 2.0);
        // slot 0 keeps its mean (0), so its implied shift stays 0
        assert_eq!(b.shift(1, 0), 0.0);
        b.write(1, 0, 2.0, 2.0, 0.5);
        assert_relative_eq!(b.precision(1, 0), 3.0);
        assert_relative_eq!(b.shift(1, 0), 1.0);
    }

    #[test]
    fn gauss_shared_write_recovers_shift() {
        let mut b = GaussBank::vague(2, 2, true);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = DVector::from_vec(vec![1.0, -1.0]);
        b.write(1, GaussianNat::new(p.clone(), s.clone()).unwrap(), 1.0).unwrap();
        assert_relative_eq!(b.shift(1), s, epsilon = 1e-12);
        assert_eq!(b.shift(0), DVector::zeros(2));
        let mut acc_p = DMatrix::zeros(2, 2);
        let mut acc_s = DVector::zeros(2);
        b.add_to(1, &mut acc_p, &mut acc_s);
        assert_relative_eq!(acc_p, p);
        assert_relative_eq!(acc_s, s, epsilon = 1e-12);
    }

    #[test]
    fn singular_shared_precision_uses_pseudo_inverse() {
        let mut b = GaussBank::vague(2, 1, true);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let s = DVector::from_vec(vec![3.0, 0.0]);
        b.write(0, GaussianNat::new(p, s.clone()).unwrap(), 1.0).unwrap();
        assert_relative_eq!(b.shift(0), s, epsilon = 1e-12);
    }
}

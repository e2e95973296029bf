//! Gaussian and probit-Bernoulli families with their product and quotient rules.
//!
//! Gaussians are kept in natural parameters (precision, precision × mean) so that
//! products and quotients are sums and differences, and so that improper or
//! indefinite quotients remain representable. Bernoulli factors are parameterised
//! by a probit score `z` with success probability `Φ(z)`.
//!
//! Internally the Bernoulli rules are evaluated on the log-odds `logit(Φ(z))`,
//! where the product becomes a sum and the quotient a difference. This is the same
//! map as the closed forms `t(z1, z2)` and `d(z1, z2)` but loses no precision when
//! one probability is close to 0 or 1.

use nalgebra::{DMatrix, DVector};
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// Largest stored probit score magnitude. `Φ(-8) ≈ 6.2e-16`.
pub const SCORE_CLAMP: f64 = 8.0;

/// Probabilities handed to [`probit_inv`] are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-15;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Standard Gaussian cdf `Φ(z)`.
pub fn probit(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `ln Φ(z)`, accurate far into both tails.
pub fn log_probit(z: f64) -> f64 {
    if z == f64::INFINITY {
        0.0
    } else if z >= 0.0 {
        (-0.5 * erfc(z / std::f64::consts::SQRT_2)).ln_1p()
    } else if z > -37.0 {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else if z == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        // Mills-ratio asymptotic series; relative error below 1e-16 here.
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
            + 105.0 / (z2 * z2 * z2 * z2);
        -0.5 * z2 - 0.5 * LN_2PI - (-z).ln() + series.ln()
    }
}

/// Standard Gaussian density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

/// `ln N(x; mean, var)`.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Inverse standard Gaussian cdf with the input clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn probit_inv(p: f64) -> f64 {
    probit_inv_unclamped(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

fn probit_inv_unclamped(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -lower_tail_inv(1.0 - p);
    }
    lower_tail_inv(p)
}

// p in (0, 0.5]
fn lower_tail_inv(p: f64) -> f64 {
    let mut z = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // Two Newton steps on ln Φ tighten the tail to a few ulps.
    for _ in 0..2 {
        let lp = log_probit(z);
        let step = (lp - p.ln()) * (lp - log_std_normal_pdf(z)).exp();
        if !step.is_finite() {
            break;
        }
        z -= step;
    }
    z
}

fn log_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * LN_2PI
}

/// Clamps a probit score to `[-SCORE_CLAMP, SCORE_CLAMP]`; NaN is passed through.
pub fn clamp_score(z: f64) -> f64 {
    if z.is_nan() {
        z
    } else {
        z.clamp(-SCORE_CLAMP, SCORE_CLAMP)
    }
}

/// Log-odds `ln Φ(z) − ln Φ(−z)` of a probit score.
pub fn score_to_logit(z: f64) -> f64 {
    if z.is_infinite() {
        return z;
    }
    log_probit(z) - log_probit(-z)
}

/// Probit score whose log-odds is `logit`, clamped to `|z| <= SCORE_CLAMP`.
pub fn logit_to_score(logit: f64) -> f64 {
    if logit.is_nan() {
        return f64::NAN;
    }
    if logit == 0.0 {
        return 0.0;
    }
    // ln of the smaller of the two probabilities, -softplus(|L|)
    let a = logit.abs();
    let ln_small = -(a + (-a).exp().ln_1p());
    let z = if ln_small <= log_probit(-SCORE_CLAMP) {
        SCORE_CLAMP
    } else {
        -probit_inv_unclamped(ln_small.exp())
    };
    let z = z.min(SCORE_CLAMP);
    if logit > 0.0 {
        z
    } else {
        -z
    }
}

/// Log-odds of a probability, `ln p − ln(1 − p)`.
pub fn prob_to_logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Probit score of the normalised product `Ber(Φ(z1))·Ber(Φ(z2))`.
pub fn bernoulli_product(z1: f64, z2: f64) -> Result<f64> {
    if z1.is_nan() || z2.is_nan() {
        return Err(Error::DegenerateBernoulli("NaN probit score".into()));
    }
    if z1.is_infinite() && z2.is_infinite() && z1.signum() != z2.signum() {
        return Err(Error::DegenerateBernoulli(format!(
            "product of certain outcomes {z1} and {z2}"
        )));
    }
    Ok(logit_to_score(score_to_logit(z1) + score_to_logit(z2)))
}

/// Probit score of the normalised quotient `Ber(Φ(z1)) / Ber(Φ(z2))`.
pub fn bernoulli_quotient(z1: f64, z2: f64) -> Result<f64> {
    if z1.is_nan() || z2.is_nan() {
        return Err(Error::DegenerateBernoulli("NaN probit score".into()));
    }
    let p2 = probit(z2);
    if p2 == 0.0 || p2 == 1.0 {
        return Err(Error::DegenerateBernoulli(format!(
            "division by a Bernoulli with probability {p2}"
        )));
    }
    if z1.is_infinite() {
        return Ok(clamp_score(z1));
    }
    Ok(logit_to_score(score_to_logit(z1) - score_to_logit(z2)))
}

/// Geometric mixture `new^η · old^(1−η)` of two Bernoulli factors, i.e. linear
/// interpolation of their log-odds.
pub fn damp_score(new: f64, old: f64, eta: f64) -> f64 {
    if eta >= 1.0 {
        return new;
    }
    logit_to_score(eta * score_to_logit(new) + (1.0 - eta) * score_to_logit(old))
}

/// One-dimensional Gaussian in natural parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarGaussianNat {
    pub precision: f64,
    pub shift: f64,
}

impl ScalarGaussianNat {
    pub fn new(precision: f64, shift: f64) -> Self {
        Self { precision, shift }
    }

    pub fn vague() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn from_moments(mean: f64, var: f64) -> Self {
        Self::new(1.0 / var, mean / var)
    }

    /// `(mean, variance)`, defined only for positive precision.
    pub fn moments(&self) -> Option<(f64, f64)> {
        (self.precision > 0.0).then(|| (self.shift / self.precision, 1.0 / self.precision))
    }

    pub fn product(&self, other: &Self) -> Self {
        Self::new(self.precision + other.precision, self.shift + other.shift)
    }

    pub fn quotient(&self, other: &Self) -> Self {
        Self::new(self.precision - other.precision, self.shift - other.shift)
    }

    pub fn damp(new: &Self, old: &Self, eta: f64) -> Self {
        Self::new(
            eta * new.precision + (1.0 - eta) * old.precision,
            eta * new.shift + (1.0 - eta) * old.shift,
        )
    }
}

/// Multivariate Gaussian in natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNat {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl GaussianNat {
    pub fn new(precision: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        let n = shift.len();
        if precision.nrows() != n || precision.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "GaussianNat::new",
                expected: n,
                actual: precision.nrows().max(precision.ncols()),
            });
        }
        let scale = precision.amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                if (precision[(i, j)] - precision[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid("precision", "matrix is not symmetric"));
                }
            }
        }
        Ok(Self { precision, shift })
    }

    /// Zero precision and zero shift: the identity element of the product.
    pub fn vague(n: usize) -> Self {
        Self {
            precision: DMatrix::zeros(n, n),
            shift: DVector::zeros(n),
        }
    }

    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        check_dim("GaussianNat::from_moments", mean.len(), cov.nrows())?;
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| not_pd(cov))?;
        let mut precision = chol.inverse();
        symmetrize(&mut precision);
        let shift = &precision * mean;
        Ok(Self { precision, shift })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// `(mean, covariance)`; fails unless the precision is positive definite.
    pub fn to_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let chol = self
            .precision
            .clone()
            .cholesky()
            .ok_or_else(|| not_pd(&self.precision))?;
        let mean = chol.solve(&self.shift);
        let mut cov = chol.inverse();
        symmetrize(&mut cov);
        Ok((mean, cov))
    }

    pub fn product(&self, other: &Self) -> Result<Self> {
        check_dim("gaussian_product", self.dim(), other.dim())?;
        Ok(Self {
            precision: &self.precision + &other.precision,
            shift: &self.shift + &other.shift,
        })
    }

    /// Natural-parameter difference. The result may be indefinite.
    pub fn quotient(&self, other: &Self) -> Result<Self> {
        check_dim("gaussian_quotient", self.dim(), other.dim())?;
        Ok(Self {
            precision: &self.precision - &other.precision,
            shift: &self.shift - &other.shift,
        })
    }

    /// Convex combination `η·new + (1−η)·old` of natural parameters.
    pub fn damp(new: &Self, old: &Self, eta: f64) -> Result<Self> {
        check_dim("damp", new.dim(), old.dim())?;
        if eta >= 1.0 {
            return Ok(new.clone());
        }
        Ok(Self {
            precision: &new.precision * eta + &old.precision * (1.0 - eta),
            shift: &new.shift * eta + &old.shift * (1.0 - eta),
        })
    }

    /// Distribution of `y = x + ε`, `ε ~ N(0, noise_cov)`, for `x` distributed as `self`.
    ///
    /// Computed as `Λ' = (I + ΛC)⁻¹Λ`, `h' = (I + ΛC)⁻¹h`, which stays defined for a
    /// singular (in particular vague) `Λ`.
    pub fn convolve(&self, noise_cov: &DMatrix<f64>) -> Result<Self> {
        let n = self.dim();
        check_dim("convolve", n, noise_cov.nrows())?;
        let mut system = &self.precision * noise_cov;
        for i in 0..n {
            system[(i, i)] += 1.0;
        }
        let lu = system.lu();
        let mut rhs = DMatrix::zeros(n, n + 1);
        rhs.view_mut((0, 0), (n, n)).copy_from(&self.precision);
        rhs.set_column(n, &self.shift);
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::NotPositiveDefinite {
                min_eigenvalue: f64::NAN,
            })?;
        let mut precision = sol.columns(0, n).into_owned();
        symmetrize(&mut precision);
        Ok(Self {
            precision,
            shift: sol.column(n).into_owned(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.precision.iter().all(|v| v.is_finite()) && self.shift.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

pub(crate) fn not_pd(m: &DMatrix<f64>) -> Error {
    let min_eigenvalue = if m.iter().all(|v| v.is_finite()) {
        m.clone().symmetric_eigenvalues().min()
    } else {
        f64::NAN
    };
    Error::NotPositiveDefinite { min_eigenvalue }
}

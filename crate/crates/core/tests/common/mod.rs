//! Independent numerical oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use hgp_spikeslab::expfam::probit;

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance `eps`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), eps, 40)
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// `(Z, E[x], E[x²], E[ω])` computed by quadrature.
#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub z: f64,
    pub mean: f64,
    pub second: f64,
    pub spike: f64,
}

/// Spike-and-slab tilted moments with cavity `N(m, v)` and spike probability `p`.
/// The spike is a point mass at zero, so only the slab needs integrating.
pub fn spike_slab_quadrature(m: f64, v: f64, p: f64, slab_var: f64) -> Moments {
    let span = 12.0 * v.sqrt();
    let (a, b) = (m - span, m + span);
    let slab = |k: i32| {
        move |x: f64| x.powi(k) * normal_pdf(x, m, v) * normal_pdf(x, 0.0, slab_var)
    };
    let eps = 1e-12;
    let s0 = (1.0 - p) * adaptive_simpson(&slab(0), a, b, eps);
    let s1 = (1.0 - p) * adaptive_simpson(&slab(1), a, b, eps);
    let s2 = (1.0 - p) * adaptive_simpson(&slab(2), a, b, eps);
    let spike = p * normal_pdf(0.0, m, v);
    let z = spike + s0;
    Moments {
        z,
        mean: s1 / z,
        second: s2 / z,
        spike: spike / z,
    }
}

/// Probit tilted moments with cavity `N(ν, s)` and spike probability `p`,
/// summing the indicator out under the integral.
pub fn probit_quadrature(nu: f64, s: f64, p: f64) -> Moments {
    let span = 12.0 * s.sqrt();
    let (a, b) = (nu - span, nu + span);
    let spike_density = move |g: f64| p * probit(g) * normal_pdf(g, nu, s);
    let slab_density = move |g: f64| (1.0 - p) * probit(-g) * normal_pdf(g, nu, s);
    let total = |k: i32| move |g: f64| g.powi(k) * (spike_density(g) + slab_density(g));
    let eps = 1e-12;
    let z = adaptive_simpson(&total(0), a, b, eps);
    Moments {
        z,
        mean: adaptive_simpson(&total(1), a, b, eps) / z,
        second: adaptive_simpson(&total(2), a, b, eps) / z,
        spike: adaptive_simpson(&spike_density, a, b, eps) / z,
    }
}

/// Messages implied by the exact marginals of `cav_a(a)·cav_b(b)·N(a; b, C)`,
/// computed from the joint `2n`-dimensional precision; returns `(onto a, onto b)`.
pub fn coupled_messages_oracle(
    cav_a: &hgp_spikeslab::expfam::GaussianNat,
    cav_b: &hgp_spikeslab::expfam::GaussianNat,
    c: &nalgebra::DMatrix<f64>,
) -> (hgp_spikeslab::expfam::GaussianNat, hgp_spikeslab::expfam::GaussianNat) {
    use hgp_spikeslab::expfam::GaussianNat;
    use nalgebra::{DMatrix, DVector};
    let n = c.nrows();
    let c_inv = c.clone().try_inverse().expect("SPD coupling");
    let mut joint = DMatrix::zeros(2 * n, 2 * n);
    joint.view_mut((0, 0), (n, n)).copy_from(&(&cav_a.precision + &c_inv));
    joint.view_mut((n, n), (n, n)).copy_from(&(&cav_b.precision + &c_inv));
    joint.view_mut((0, n), (n, n)).copy_from(&(-&c_inv));
    joint.view_mut((n, 0), (n, n)).copy_from(&(-&c_inv));
    let mut shift = DVector::zeros(2 * n);
    shift.rows_mut(0, n).copy_from(&cav_a.shift);
    shift.rows_mut(n, n).copy_from(&cav_b.shift);
    let cov = joint.try_inverse().expect("proper joint");
    let mean = &cov * shift;
    let marginal = |off: usize| {
        let s = cov.view((off, off), (n, n)).into_owned();
        let p = s.try_inverse().expect("proper marginal");
        let h = &p * mean.rows(off, n);
        GaussianNat { precision: p, shift: h }
    };
    let (qa, qb) = (marginal(0), marginal(n));
    (qa.quotient(cav_a).unwrap(), qb.quotient(cav_b).unwrap())
}

//! Closed-form moments of the two non-Gaussian tilted distributions.

use crate::expfam::{log_normal_pdf, log_probit};

/// Moments of a tilted distribution over one continuous variable and its
/// binary spike indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedMoments {
    /// `ln Z`.
    pub log_normalizer: f64,
    /// First moment of the continuous variable.
    pub mean: f64,
    /// Second (raw) moment of the continuous variable.
    pub second_moment: f64,
    /// Central variance of the continuous variable, computed without cancellation.
    pub variance: f64,
    /// `E[ω]`.
    pub spike_prob: f64,
    /// Log-odds of `E[ω]`.
    pub spike_logit: f64,
}

impl TiltedMoments {
    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }
}

/// `ln σ(l) = −ln(1 + e^{−l})`, the log-probability of a Bernoulli with log-odds `l`.
pub fn log_sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        -(-l).exp().ln_1p()
    } else {
        l - l.exp().ln_1p()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Tilted moments of `N(x; m, v)·Ber(ω; p)·[ω δ₀(x) + (1 − ω) N(x; 0, σ_x²)]`,
/// with the cavity spike probability `p` given by its log-odds.
///
/// `Z = p N(0; m, v) + (1 − p) N(0; m, v + σ_x²)`; given a slab, `x` is
/// Gaussian with mean `m σ_x²/(v + σ_x²)` and variance `v σ_x²/(v + σ_x²)`.
pub fn spike_slab_tilted(cavity_mean: f64, cavity_var: f64, cavity_logit: f64, slab_var: f64) -> TiltedMoments {
    let (m, v) = (cavity_mean, cavity_var);
    let log_spike = log_sigmoid(cavity_logit) + log_normal_pdf(0.0, m, v);
    let log_slab = log_sigmoid(-cavity_logit) + log_normal_pdf(0.0, m, v + slab_var);
    let log_normalizer = log_add_exp(log_spike, log_slab);
    let spike_prob = (log_spike - log_normalizer).exp();
    let slab_prob = (log_slab - log_normalizer).exp();

    let shrink = slab_var / (v + slab_var);
    let slab_mean = m * shrink;
    let slab_var_post = v * shrink;
    let mean = slab_prob * slab_mean;
    TiltedMoments {
        log_normalizer,
        mean,
        second_moment: slab_prob * (slab_mean * slab_mean + slab_var_post),
        variance: slab_prob * slab_var_post + spike_prob * slab_prob * slab_mean * slab_mean,
        spike_prob,
        spike_logit: log_spike - log_slab,
    }
}

/// Tilted moments of `N(γ; ν, s)·Ber(ω; p)·Ber(ω; Φ(γ))`, with the cavity
/// spike probability `p = Φ(z)` given by its log-odds.
///
/// With `a = ν/√(1 + s)`: `Z = Φ(z)Φ(a) + (1 − Φ(z))(1 − Φ(a))` and
/// `E[ω] = Φ(z)Φ(a)/Z`. The γ moments are assembled from the two conditional
/// densities `N(γ; ν, s)Φ(γ)/Φ(a)` and `N(γ; ν, s)Φ(−γ)/Φ(−a)`, whose means and
/// variances use the inverse Mills ratios `N(a)/Φ(±a)`; expanding the mixture
/// gives `E[γ] = [Φ(z)K + (1 − Φ(z))(ν − K)]/Z` with
/// `K = s N(a)/√(1 + s) + ν Φ(a)`.
pub fn probit_tilted(cavity_mean: f64, cavity_var: f64, cavity_logit: f64) -> TiltedMoments {
    let (nu, s) = (cavity_mean, cavity_var);
    let root = (1.0 + s).sqrt();
    let a = nu / root;
    let log_phi_a = log_probit(a);
    let log_phi_neg_a = log_probit(-a);
    let log_spike = log_sigmoid(cavity_logit) + log_phi_a;
    let log_slab = log_sigmoid(-cavity_logit) + log_phi_neg_a;
    let log_normalizer = log_add_exp(log_spike, log_slab);
    let w1 = (log_spike - log_normalizer).exp();
    let w0 = (log_slab - log_normalizer).exp();

    let log_pdf_a = -0.5 * a * a - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mills1 = (log_pdf_a - log_phi_a).exp();
    let mills0 = (log_pdf_a - log_phi_neg_a).exp();
    let gain = s * s / (1.0 + s);
    let mean1 = nu + s * mills1 / root;
    let mean0 = nu - s * mills0 / root;
    let var1 = (s - gain * mills1 * (a + mills1)).max(0.0);
    let var0 = (s - gain * mills0 * (mills0 - a)).max(0.0);

    let mean = w1 * mean1 + w0 * mean0;
    let diff = mean1 - mean0;
    let variance = w1 * var1 + w0 * var0 + w1 * w0 * diff * diff;
    TiltedMoments {
        log_normalizer,
        mean,
        second_moment: variance + mean * mean,
        variance,
        spike_prob: w1,
        spike_logit: log_spike - log_slab,
    }
}

/// Log-odds carried by the refined f or h Bernoulli factor: the tilted log-odds
/// with the cavity's log-odds divided out.
pub fn factor_logit(moments: &TiltedMoments, cavity_logit: f64) -> f64 {
    moments.spike_logit - cavity_logit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{probit, score_to_logit, std_normal_pdf};
    use approx::assert_abs_diff_eq;

    #[test]
    fn spike_slab_symmetric_cavity() {
        let m = spike_slab_tilted(0.0, 1.0, 0.0, 1.0);
        assert_eq!(m.mean, 0.0);
        // Z = 0.5 N(0;0,1) + 0.5 N(0;0,2)
        let z = 0.5 * std_normal_pdf(0.0) + 0.5 * std_normal_pdf(0.0) / 2f64.sqrt();
        assert_abs_diff_eq!(m.normalizer(), z, epsilon = 1e-15);
        assert_abs_diff_eq!(m.normalizer(), 0.340_518_536, epsilon = 1e-9);
        assert_abs_diff_eq!(m.spike_prob, 0.585_786_4, epsilon = 1e-6);
        // quadrature of x² over the slab branch: 0.5·N(0;0,2)·(1/2)/Z
        assert_abs_diff_eq!(m.second_moment, 0.207_106_8, epsilon = 1e-6);
        assert_abs_diff_eq!(m.variance, m.second_moment, epsilon = 1e-15);
    }

    #[test]
    fn spike_slab_vanishing_slab() {
        let m = spike_slab_tilted(1.5, 0.5, score_to_logit(0.3), 1e-14);
        assert!(m.mean.abs() < 1e-12);
        // both point masses sit at 0 with equal density
        assert_abs_diff_eq!(m.spike_prob, probit(0.3), epsilon = 1e-10);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_abs_diff_eq!(log_sigmoid(0.0), -std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(log_sigmoid(800.0), 0.0, epsilon = 1e-300);
        assert_abs_diff_eq!(log_sigmoid(-800.0), -800.0, epsilon = 1e-12);
        assert_abs_diff_eq!(log_sigmoid(score_to_logit(1.3)), probit(1.3).ln(), epsilon = 1e-13);
    }

    #[test]
    fn probit_symmetric_cavity() {
        let m = probit_tilted(0.0, 1.0, 0.0);
        assert_abs_diff_eq!(m.normalizer(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.mean, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.spike_prob, 0.5, epsilon = 1e-15);
        let k = std_normal_pdf(0.0) / 2f64.sqrt();
        assert_abs_diff_eq!(k, 0.282_094_79, epsilon = 1e-8);
        // both conditionals are ±K-shifted with equal weight, so E[γ²] = s = 1
        assert_abs_diff_eq!(m.second_moment, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_k_expansion_agrees() {
        for &(nu, s, z) in &[(0.4, 2.0, -0.7), (-1.3, 0.3, 1.1), (2.0, 5.0, 0.0)] {
            let m = probit_tilted(nu, s, score_to_logit(z));
            let a: f64 = nu / (1.0 + s).sqrt();
            let k = s * std_normal_pdf(a) / (1.0 + s).sqrt() + nu * probit(a);
            let pz = probit(z);
            let zn = pz * probit(a) + (1.0 - pz) * (1.0 - probit(a));
            let mean = (pz * k + (1.0 - pz) * (nu - k)) / zn;
            let second = ((2.0 * pz - 1.0)
                * (nu * nu * probit(a) + s * probit(a) + 2.0 * nu * s * std_normal_pdf(a) / (1.0 + s).sqrt()
                    - s * s * a * std_normal_pdf(a) / (1.0 + s))
                + (1.0 - pz) * (s + nu * nu))
                / zn;
            assert_abs_diff_eq!(m.normalizer(), zn, epsilon = 1e-14);
            assert_abs_diff_eq!(m.mean, mean, epsilon = 1e-12);
            assert_abs_diff_eq!(m.second_moment, second, epsilon = 1e-12);
        }
    }

    #[test]
    fn factor_logit_removes_cavity_prior() {
        let l = score_to_logit(1.2);
        let m = probit_tilted(0.7, 0.4, l);
        let a = 0.7 / 1.4f64.sqrt();
        let expected = log_probit(a) - log_probit(-a);
        assert_abs_diff_eq!(factor_logit(&m, l), expected, epsilon = 1e-12);
    }
}

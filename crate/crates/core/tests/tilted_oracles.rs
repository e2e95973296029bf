mod common;

use common::{adaptive_simpson, probit_quadrature, spike_slab_quadrature};
use hgp_spikeslab::ep::{probit_tilted, spike_slab_tilted};
use hgp_spikeslab::expfam::{probit, score_to_logit};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

#[test]
fn simpson_integrates_known_functions() {
    let sq = adaptive_simpson(&|x| x * x, 0.0, 3.0, 1e-12);
    assert!((sq - 9.0).abs() < 1e-12);
    let gauss = adaptive_simpson(&|x| (-x * x / 2.0).exp(), -12.0, 12.0, 1e-12);
    assert!((gauss - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spike_slab_matches_quadrature(
        m in -3.0f64..3.0,
        v in 0.1f64..10.0,
        z in -3.0f64..3.0,
        slab_var in 0.5f64..20.0,
    ) {
        let tm = spike_slab_tilted(m, v, score_to_logit(z), slab_var);
        let q = spike_slab_quadrature(m, v, probit(z), slab_var);
        prop_assert!((tm.normalizer() - q.z).abs() < TOL, "Z {} vs {}", tm.normalizer(), q.z);
        prop_assert!((tm.mean - q.mean).abs() < TOL, "mean {} vs {}", tm.mean, q.mean);
        prop_assert!((tm.second_moment - q.second).abs() < TOL, "second {} vs {}", tm.second_moment, q.second);
        prop_assert!((tm.spike_prob - q.spike).abs() < TOL, "spike {} vs {}", tm.spike_prob, q.spike);
    }

    #[test]
    fn probit_matches_quadrature(
        nu in -3.0f64..3.0,
        s in 0.1f64..10.0,
        z in -3.0f64..3.0,
    ) {
        let tm = probit_tilted(nu, s, score_to_logit(z));
        let q = probit_quadrature(nu, s, probit(z));
        prop_assert!((tm.normalizer() - q.z).abs() < TOL, "Z {} vs {}", tm.normalizer(), q.z);
        prop_assert!((tm.mean - q.mean).abs() < TOL, "mean {} vs {}", tm.mean, q.mean);
        prop_assert!((tm.second_moment - q.second).abs() < TOL, "second {} vs {}", tm.second_moment, q.second);
        prop_assert!((tm.spike_prob - q.spike).abs() < TOL, "spike {} vs {}", tm.spike_prob, q.spike);
    }
}

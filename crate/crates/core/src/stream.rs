//! Online filtering: warm start on a prefix, then predict/update cycles over
//! blocks of new timestamps.
//!
//! Past timestamps are frozen once processed; only the Gaussian summary
//! `N(μ; e, D)` of the latest μ is carried forward.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ep::{run_offline, EpState, PosteriorSummary};
use crate::error::{Error, Result};
use crate::expfam::{symmetrize, GaussianNat};
use crate::model::{Dataset, Hyperparams};

pub const DEFAULT_T_INIT: usize = 10;
pub const DEFAULT_BLOCK: usize = 1;

/// Bookkeeping for the warm start or one update block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    /// First timestamp of the block.
    pub start: usize,
    pub len: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Wall time of the whole block, setup included.
    pub seconds: f64,
    /// Wall time spent inside EP sweeps.
    pub sweep_seconds: f64,
}

/// Predicted prior `N(μ; mean, cov)` on the first μ of the next block.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Prediction {
    pub fn to_natural(&self) -> Result<GaussianNat> {
        GaussianNat::from_moments(&self.mean, &self.cov)
    }
}

#[derive(Debug, Clone)]
pub struct StreamState {
    hyper: Hyperparams,
    design: DMatrix<f64>,
    w: DMatrix<f64>,
    /// Timestamps processed so far.
    t: usize,
    /// Posterior mean `e` of the latest μ.
    e: DVector<f64>,
    /// Posterior covariance `D` of the latest μ.
    d: DMatrix<f64>,
    history: Vec<PosteriorSummary>,
    blocks: Vec<BlockRecord>,
}

/// Runs offline EP on the prefix `d` and keeps the μ posterior at its last timestamp.
pub fn init_stream(d: &Dataset, h: &Hyperparams) -> Result<StreamState> {
    let start = Instant::now();
    let (state, summary, diag) = run_offline(d, h)?;
    let (e, cov) = last_mu(&state)?;
    let w = state.temporal_covariance().clone();
    Ok(StreamState {
        hyper: h.clone(),
        design: d.design.clone(),
        w,
        t: d.t_len(),
        e,
        d: cov,
        history: vec![summary],
        blocks: vec![BlockRecord {
            start: 0,
            len: d.t_len(),
            iterations: diag.iterations,
            converged: diag.converged,
            seconds: start.elapsed().as_secs_f64(),
            sweep_seconds: diag.sweeps.iter().map(|r| r.seconds).sum(),
        }],
    })
}

/// Warm start on the first `t_init` timestamps of `d`, then updates in blocks
/// of `block` timestamps (the last block may be shorter).
pub fn run_stream(d: &Dataset, h: &Hyperparams, t_init: usize, block: usize) -> Result<StreamState> {
    if t_init == 0 || t_init > d.t_len() {
        return Err(Error::invalid("t_init", format!("must lie in 1..={}, got {t_init}", d.t_len())));
    }
    if block == 0 {
        return Err(Error::invalid("block", "must be at least 1"));
    }
    let mut s = init_stream(&d.window(0, t_init)?, h)?;
    let mut t = t_init;
    while t < d.t_len() {
        let len = block.min(d.t_len() - t);
        s.update(&d.observations.columns(t, len).into_owned())?;
        t += len;
    }
    Ok(s)
}

impl StreamState {
    /// Timestamps processed so far.
    pub fn timestamp(&self) -> usize {
        self.t
    }

    /// `(e, D)` of the latest μ.
    pub fn mu_posterior(&self) -> (&DVector<f64>, &DMatrix<f64>) {
        (&self.e, &self.d)
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn blocks(&self) -> &[BlockRecord] {
        &self.blocks
    }

    /// Prior on the next μ: the mean carries over and `W` is added to `D`.
    pub fn predict(&self) -> Prediction {
        let mut cov = &self.d + &self.w;
        symmetrize(&mut cov);
        Prediction {
            mean: self.e.clone(),
            cov,
        }
    }

    /// Processes the `K × M` block `y_new` with the predicted prior held
    /// fixed on its first μ. Damping restarts from its configured value.
    pub fn update(&mut self, y_new: &DMatrix<f64>) -> Result<()> {
        let timestamp = self.t;
        let wrap = |source: Error| Error::Stream {
            timestamp,
            source: Box::new(source),
        };
        let start = Instant::now();
        let prior = self.predict().to_natural().map_err(wrap)?;
        let data = Dataset::new(self.design.clone(), y_new.clone()).map_err(wrap)?;
        let mut state = EpState::new(&data, &self.hyper, Some(prior)).map_err(wrap)?;
        let diag = state.run().map_err(wrap)?;
        let summary = state.summary().map_err(wrap)?;
        let (e, d) = last_mu(&state).map_err(wrap)?;
        self.e = e;
        self.d = d;
        self.t += y_new.ncols();
        self.history.push(summary);
        self.blocks.push(BlockRecord {
            start: timestamp,
            len: y_new.ncols(),
            iterations: diag.iterations,
            converged: diag.converged,
            seconds: start.elapsed().as_secs_f64(),
            sweep_seconds: diag.sweeps.iter().map(|r| r.seconds).sum(),
        });
        Ok(())
    }

    /// One timestamp: predict then update with `M = 1`.
    pub fn step(&mut self, y_t: &DVector<f64>) -> Result<()> {
        self.update(&DMatrix::from_column_slice(y_t.len(), 1, y_t.as_slice()))
    }

    /// Posterior summaries of every processed timestamp, in order.
    pub fn summary(&self) -> PosteriorSummary {
        let (n, t) = (self.design.ncols(), self.t);
        let mut out = PosteriorSummary {
            x_mean: DMatrix::zeros(n, t),
            x_var: DMatrix::zeros(n, t),
            spike_prob: DMatrix::zeros(n, t),
            spike_logit: DMatrix::zeros(n, t),
            spike_score: DMatrix::zeros(n, t),
            gamma_mean: DMatrix::zeros(n, t),
            mu_mean: DMatrix::zeros(n, t),
        };
        let mut col = 0;
        for s in &self.history {
            let len = s.x_mean.ncols();
            out.x_mean.columns_mut(col, len).copy_from(&s.x_mean);
            out.x_var.columns_mut(col, len).copy_from(&s.x_var);
            out.spike_prob.columns_mut(col, len).copy_from(&s.spike_prob);
            out.spike_logit.columns_mut(col, len).copy_from(&s.spike_logit);
            out.spike_score.columns_mut(col, len).copy_from(&s.spike_score);
            out.gamma_mean.columns_mut(col, len).copy_from(&s.gamma_mean);
            out.mu_mean.columns_mut(col, len).copy_from(&s.mu_mean);
            col += len;
        }
        out
    }
}

fn last_mu(state: &EpState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (e, mut d) = state.mu_marginal(state.t_len() - 1).to_moments()?;
    symmetrize(&mut d);
    Ok((e, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::metrics::{f_measure, support_from_spikes};
    use crate::model::{synthetic_instance, GroupConfig};
    use approx::assert_relative_eq;

    fn small_hyper() -> Hyperparams {
        let mut h = Hyperparams::synthetic();
        h.spatial = KernelSpec::squared_exponential(10.0, 2.0);
        h.max_iterations = 60;
        h
    }

    fn small_data(t_len: usize, seed: u64) -> Dataset {
        let cfg = GroupConfig {
            n: 20,
            t_len,
            ..GroupConfig::default()
        };
        synthetic_instance(&cfg, 0.5, seed).unwrap()
    }

    fn f_of(d: &Dataset, s: &PosteriorSummary) -> f64 {
        let truth = support_from_spikes(d.spikes.as_ref().unwrap());
        f_measure(&truth, &s.spike_prob.map(|p| p < 0.5)).unwrap().f_measure
    }

    #[test]
    fn full_prefix_equals_offline() {
        let d = small_data(4, 1);
        let h = small_hyper();
        let s = init_stream(&d, &h).unwrap();
        let (_, offline, _) = run_offline(&d, &h).unwrap();
        assert_eq!(s.timestamp(), 4);
        assert_eq!(s.summary(), offline);
    }

    #[test]
    fn single_timestamp_prefix_is_valid() {
        let d = small_data(1, 2);
        let s = init_stream(&d, &small_hyper()).unwrap();
        let (_, cov) = s.mu_posterior();
        assert!(cov.clone().cholesky().is_some());
    }

    #[test]
    fn predict_adds_increment_covariance() {
        let d = small_data(2, 3);
        let mut h = small_hyper();
        h.temporal = KernelSpec::squared_exponential(10.0, 15.0);
        let mut s = init_stream(&d, &h).unwrap();
        s.d = DMatrix::identity(20, 20);
        let p = s.predict();
        assert_eq!(p.mean, s.e);
        for i in 0..20 {
            assert_relative_eq!(p.cov[(i, i)], 1.0 + 10.0 + h.temporal.effective_jitter(), epsilon = 1e-12);
        }
        // a zero D predicts W itself
        s.d = DMatrix::zeros(20, 20);
        assert_eq!(s.predict().cov, s.w);
    }

    #[test]
    fn predict_never_shrinks_variances() {
        let d = small_data(3, 4);
        let s = init_stream(&d, &small_hyper()).unwrap();
        let p = s.predict();
        for i in 0..20 {
            assert!(p.cov[(i, i)] >= s.d[(i, i)]);
        }
    }

    #[test]
    fn fixed_prior_survives_the_update_loop() {
        let d = small_data(3, 5);
        let h = small_hyper();
        let s = init_stream(&d.window(0, 2).unwrap(), &h).unwrap();
        let prior = s.predict().to_natural().unwrap();
        let block = d.window(2, 1).unwrap();
        let mut state = EpState::new(&block, &h, Some(prior.clone())).unwrap();
        state.run().unwrap();
        assert_eq!(state.mu_prior(), &prior);
    }

    #[test]
    fn step_equals_update_with_one_column() {
        let d = small_data(4, 6);
        let h = small_hyper();
        let mut a = init_stream(&d.window(0, 2).unwrap(), &h).unwrap();
        let mut b = a.clone();
        a.step(&d.observations.column(2).into_owned()).unwrap();
        b.update(&d.observations.columns(2, 1).into_owned()).unwrap();
        assert_eq!(a.summary(), b.summary());
        assert_eq!(a.mu_posterior(), b.mu_posterior());
    }

    #[test]
    fn stream_advances_by_its_length() {
        let d = small_data(7, 7);
        let s = run_stream(&d, &small_hyper(), 2, 2).unwrap();
        assert_eq!(s.timestamp(), 7);
        assert_eq!(s.summary().x_mean.ncols(), 7);
        let lens: Vec<usize> = s.blocks().iter().map(|b| b.len).collect();
        assert_eq!(lens, vec![2, 2, 2, 1]);
    }

    #[test]
    fn zero_observations_under_a_tight_prior_give_zero_signal() {
        let d = small_data(2, 8);
        let mut h = small_hyper();
        h.noise_var = 1e-6;
        let mut s = init_stream(&d, &h).unwrap();
        s.step(&DVector::zeros(d.k())).unwrap();
        let x = s.summary().x_mean.column(2).amax();
        assert!(x < 1e-3, "{x}");
    }

    #[test]
    fn one_block_of_two_matches_two_single_steps() {
        let d = small_data(6, 9);
        let h = small_hyper();
        let singles = run_stream(&d, &h, 4, 1).unwrap();
        let pair = run_stream(&d, &h, 4, 2).unwrap();
        let tail = d.window(4, 2).unwrap();
        let fa = f_of(&tail, &singles.summary().columns(4, 2));
        let fb = f_of(&tail, &pair.summary().columns(4, 2));
        assert!((fa - fb).abs() <= 0.05, "{fa} vs {fb}");
    }

    #[test]
    fn invalid_windows_are_rejected() {
        let d = small_data(3, 10);
        assert!(run_stream(&d, &small_hyper(), 0, 1).is_err());
        assert!(run_stream(&d, &small_hyper(), 4, 1).is_err());
        assert!(run_stream(&d, &small_hyper(), 1, 0).is_err());
    }
}

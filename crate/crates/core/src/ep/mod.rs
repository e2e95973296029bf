//! Batch expectation propagation for the two-level GP spike-and-slab model.
//!
//! The approximate posterior factorizes into four families of refinable
//! factors: `f` (spike-and-slab prior on `x_t`), `h` (probit link between `γ_t`
//! and `ω_t`), `r` (spatial GP coupling `γ_t` to `μ_t`) and `u` (temporal chain
//! between `μ_{t−1}` and `μ_t`), plus the fixed likelihood factor `g` and a
//! fixed prior on the first `μ`. Everything is kept in natural parameters so
//! marginals are plain sums of their factors.

mod bank;
pub mod tilted;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{logit_to_score, GaussianNat};
use crate::model::{Dataset, Hyperparams};
use bank::{DiagBank, GaussBank};
pub use tilted::{factor_logit, log_sigmoid, probit_tilted, spike_slab_tilted, TiltedMoments};

/// Relative jitter tried once when an assembled signal precision is not positive definite.
const ASSEMBLY_JITTER: f64 = 1e-10;
/// Tilted variances are kept above this fraction of the cavity variance.
const VARIANCE_FLOOR: f64 = 1e-10;

/// Per-sweep bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub iteration: usize,
    /// Relative change of the signal estimate (max-abs-entry norm).
    pub change: f64,
    /// Damping used during this sweep.
    pub eta: f64,
    pub negative_variances: usize,
    /// Scalar updates skipped for an improper cavity or a tiny normaliser.
    pub skipped_updates: usize,
    /// Whole factor updates skipped because a marginal was not yet proper.
    pub improper_marginals: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sweeps: Vec<SweepRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_secs: f64,
}

/// Posterior summaries, each `N×T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub x_mean: DMatrix<f64>,
    pub x_var: DMatrix<f64>,
    /// Posterior probability that `x_it` is exactly zero.
    pub spike_prob: DMatrix<f64>,
    /// Log-odds of `spike_prob`.
    pub spike_logit: DMatrix<f64>,
    /// Clamped probit score `z_it` with `Φ(z_it) ≈ spike_prob`.
    pub spike_score: DMatrix<f64>,
    /// `NaN` where the γ marginal is not proper.
    pub gamma_mean: DMatrix<f64>,
    /// `NaN` where the μ marginal is not proper.
    pub mu_mean: DMatrix<f64>,
}

impl PosteriorSummary {
    /// Columns `start..start + len`.
    pub fn columns(&self, start: usize, len: usize) -> Self {
        Self {
            x_mean: self.x_mean.columns(start, len).into_owned(),
            x_var: self.x_var.columns(start, len).into_owned(),
            spike_prob: self.spike_prob.columns(start, len).into_owned(),
            spike_logit: self.spike_logit.columns(start, len).into_owned(),
            spike_score: self.spike_score.columns(start, len).into_owned(),
            gamma_mean: self.gamma_mean.columns(start, len).into_owned(),
            mu_mean: self.mu_mean.columns(start, len).into_owned(),
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Counters {
    negative_variances: usize,
    skipped_updates: usize,
    improper_marginals: usize,
}

/// Full EP state: fixed factors, refinable factors and the cached signal mean.
#[derive(Debug, Clone)]
pub struct EpState {
    hyper: Hyperparams,
    n: usize,
    t_len: usize,
    sigma0: DMatrix<f64>,
    w: DMatrix<f64>,
    g_precision: DMatrix<f64>,
    g_shift: DMatrix<f64>,
    f: DiagBank,
    /// Bernoulli parts of `f` and `h` as log-odds of a spike.
    logit_f: DMatrix<f64>,
    h: DiagBank,
    logit_h: DMatrix<f64>,
    r_gamma: GaussBank,
    r_mu: GaussBank,
    /// Slot `k` carries the message onto `μ_{k+1}`.
    u_fwd: GaussBank,
    /// Slot `k` carries the message onto `μ_k`.
    u_bwd: GaussBank,
    mu_prior: GaussianNat,
    x_mean: DMatrix<f64>,
    eta: f64,
    iteration: usize,
    counters: Counters,
}

/// Builds the initial state with the default chain prior `μ₁ ~ N(μ₀·1, W)`.
pub fn init_state(d: &Dataset, h: &Hyperparams) -> Result<EpState> {
    EpState::new(d, h, None)
}

impl EpState {
    /// Initial state. `mu_prior` replaces the default prior on the first μ.
    ///
    /// Likelihood factors come straight from `A`, `Y`, `σ²`. The `f` factors
    /// start at the slab `N(0, σ_x²)` so the signal marginal is proper even
    /// when `K < N`; every other refinable factor starts vague with score 0.
    pub fn new(d: &Dataset, h: &Hyperparams, mu_prior: Option<GaussianNat>) -> Result<Self> {
        h.validate()?;
        let (n, t_len) = (d.n(), d.t_len());
        if t_len == 0 {
            return Err(Error::invalid("dataset", "needs at least one timestamp"));
        }
        let sigma0 = h.spatial.build(n)?;
        let w = h.temporal.build(n)?;
        let mu_prior = match mu_prior {
            Some(p) => {
                if p.dim() != n {
                    return Err(Error::DimensionMismatch {
                        context: "mu prior",
                        expected: n,
                        actual: p.dim(),
                    });
                }
                p
            }
            None => GaussianNat::from_moments(&DVector::from_element(n, h.mu_prior_mean), &w)?,
        };
        let a = &d.design;
        let mut g_precision = a.tr_mul(a) / h.noise_var;
        crate::expfam::symmetrize(&mut g_precision);
        let g_shift = a.tr_mul(&d.observations) / h.noise_var;
        let shared = !h.per_timestamp_covariances;
        let links = t_len.saturating_sub(1);
        let mut state = Self {
            hyper: h.clone(),
            n,
            t_len,
            sigma0,
            w,
            g_precision,
            g_shift,
            f: DiagBank::new(n, t_len, 1.0 / h.slab_var, false),
            logit_f: DMatrix::zeros(n, t_len),
            h: DiagBank::new(n, t_len, 0.0, shared),
            logit_h: DMatrix::zeros(n, t_len),
            r_gamma: GaussBank::vague(n, t_len, shared),
            r_mu: GaussBank::vague(n, t_len, shared),
            u_fwd: GaussBank::vague(n, links, shared),
            u_bwd: GaussBank::vague(n, links, shared),
            mu_prior,
            x_mean: DMatrix::zeros(n, t_len),
            eta: h.eta,
            iteration: 0,
            counters: Counters::default(),
        };
        for t in 0..t_len {
            state.refresh_x_mean(t)?;
        }
        Ok(state)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Overrides the damping used by subsequent updates.
    pub fn set_eta(&mut self, eta: f64) {
        self.eta = eta;
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Fixed prior factor on the first μ of the chain.
    pub fn mu_prior(&self) -> &GaussianNat {
        &self.mu_prior
    }

    /// Cached `X̂`, the `N×T` matrix of signal means.
    pub fn x_mean(&self) -> &DMatrix<f64> {
        &self.x_mean
    }

    pub fn spatial_covariance(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    pub fn temporal_covariance(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Log-odds of a spike carried by `f_it`.
    pub fn logit_f(&self, i: usize, t: usize) -> f64 {
        self.logit_f[(i, t)]
    }

    /// Log-odds of a spike carried by `h_it`.
    pub fn logit_h(&self, i: usize, t: usize) -> f64 {
        self.logit_h[(i, t)]
    }

    /// Clamped probit score of `f_it`.
    pub fn z_f(&self, i: usize, t: usize) -> f64 {
        logit_to_score(self.logit_f[(i, t)])
    }

    /// Clamped probit score of `h_it`.
    pub fn z_h(&self, i: usize, t: usize) -> f64 {
        logit_to_score(self.logit_h[(i, t)])
    }

    /// Log-odds of a spike under the ω marginal: the product of the `f` and
    /// `h` Bernoulli factors.
    pub fn spike_logit(&self, i: usize, t: usize) -> f64 {
        self.logit_f[(i, t)] + self.logit_h[(i, t)]
    }

    /// Clamped probit score `z_it` of the ω marginal.
    pub fn spike_score(&self, i: usize, t: usize) -> f64 {
        logit_to_score(self.spike_logit(i, t))
    }

    /// Natural parameters of the `x_t` marginal: `g_t · f_t`.
    pub fn x_marginal(&self, t: usize) -> GaussianNat {
        let (fp, fs) = self.f.natural(t);
        let mut precision = self.g_precision.clone();
        for i in 0..self.n {
            precision[(i, i)] += fp[i];
        }
        GaussianNat {
            precision,
            shift: self.g_shift.column(t) + fs,
        }
    }

    /// Natural parameters of the `γ_t` marginal: `h_t · r_t`.
    pub fn gamma_marginal(&self, t: usize) -> GaussianNat {
        let (hp, hs) = self.h.natural(t);
        let mut precision = self.r_gamma.precision(t).clone();
        for i in 0..self.n {
            precision[(i, i)] += hp[i];
        }
        GaussianNat {
            precision,
            shift: self.r_gamma.shift(t) + hs,
        }
    }

    /// Natural parameters of the `μ_t` marginal: `r_t`, the chain messages
    /// from both neighbours, and the prior at the first timestamp.
    pub fn mu_marginal(&self, t: usize) -> GaussianNat {
        let mut m = self.mu_cavity_r(t);
        self.r_mu.add_to(t, &mut m.precision, &mut m.shift);
        m
    }

    /// `h_t` as a full-matrix Gaussian (the γ cavity seen by `r_t`).
    fn h_natural(&self, t: usize) -> GaussianNat {
        let (hp, hs) = self.h.natural(t);
        GaussianNat {
            precision: DMatrix::from_diagonal(&hp),
            shift: hs,
        }
    }

    /// μ_t marginal without `r_t`.
    fn mu_cavity_r(&self, t: usize) -> GaussianNat {
        let mut m = GaussianNat::vague(self.n);
        self.add_chain(t, true, true, &mut m);
        m
    }

    fn add_chain(&self, t: usize, from_prev: bool, from_next: bool, m: &mut GaussianNat) {
        if from_prev {
            if t == 0 {
                m.precision += &self.mu_prior.precision;
                m.shift += &self.mu_prior.shift;
            } else {
                self.u_fwd.add_to(t - 1, &mut m.precision, &mut m.shift);
            }
        }
        if from_next && t + 1 < self.t_len {
            self.u_bwd.add_to(t, &mut m.precision, &mut m.shift);
        }
    }

    fn refresh_x_mean(&mut self, t: usize) -> Result<()> {
        let m = self.x_marginal(t);
        let chol = cholesky_with_jitter(&m.precision)?;
        self.x_mean.set_column(t, &chol.solve(&m.shift));
        Ok(())
    }

    /// Refines every `f_it` at timestamp `t` in parallel, all cavities taken
    /// from the same marginal.
    pub fn update_f(&mut self, t: usize) -> Result<()> {
        self.check_t(t)?;
        let m = self.x_marginal(t);
        let q = Snapshot::new(&cholesky_with_jitter(&m.precision)?, &m.shift);
        let eta = self.eta;
        for i in 0..self.n {
            let (fp, fs) = (self.f.precision(i, t), self.f.shift(i, t));
            let Some((cav_mean, cav_var)) = q.cavity(i, fp, fs) else {
                self.counters.skipped_updates += 1;
                continue;
            };
            let cav_logit = self.logit_h[(i, t)];
            let tm = spike_slab_tilted(cav_mean, cav_var, cav_logit, self.hyper.slab_var);
            let Some((p, s)) = self.refined_scalar(&tm, cav_mean, cav_var) else {
                continue;
            };
            self.f.write(i, t, p, s, eta);
            let logit = damp_logit(factor_logit(&tm, cav_logit), self.logit_f[(i, t)], eta);
            self.logit_f[(i, t)] = logit;
            let (np, ns) = (self.f.precision(i, t), self.f.shift(i, t));
            if !(np.is_finite() && ns.is_finite() && logit.is_finite()) {
                return Err(Error::NonFinite {
                    factor: "f",
                    timestamp: t,
                    component: Some(i),
                });
            }
        }
        self.refresh_x_mean(t)
    }

    /// Refines every `h_it` at timestamp `t` in parallel. Skipped as a whole
    /// while the γ marginal is improper.
    pub fn update_h(&mut self, t: usize) -> Result<()> {
        self.check_t(t)?;
        let m = self.gamma_marginal(t);
        let Some(chol) = m.precision.clone().cholesky() else {
            self.counters.improper_marginals += 1;
            return Ok(());
        };
        let q = Snapshot::new(&chol, &m.shift);
        let eta = self.eta;
        for i in 0..self.n {
            let (hp, hs) = (self.h.precision(i, t), self.h.shift(i, t));
            let Some((cav_mean, cav_var)) = q.cavity(i, hp, hs) else {
                self.counters.skipped_updates += 1;
                continue;
            };
            let cav_logit = self.logit_f[(i, t)];
            let tm = probit_tilted(cav_mean, cav_var, cav_logit);
            let Some((p, s)) = self.refined_scalar(&tm, cav_mean, cav_var) else {
                continue;
            };
            self.h.write(i, t, p, s, eta);
            let logit = damp_logit(factor_logit(&tm, cav_logit), self.logit_h[(i, t)], eta);
            self.logit_h[(i, t)] = logit;
            let (np, ns) = (self.h.precision(i, t), self.h.shift(i, t));
            if !(np.is_finite() && ns.is_finite() && logit.is_finite()) {
                return Err(Error::NonFinite {
                    factor: "h",
                    timestamp: t,
                    component: Some(i),
                });
            }
        }
        Ok(())
    }

    /// New scalar factor `(precision, shift)` from tilted moments, or `None`
    /// when the normaliser is below the floor.
    fn refined_scalar(&mut self, tm: &TiltedMoments, cav_mean: f64, cav_var: f64) -> Option<(f64, f64)> {
        let cav_precision = 1.0 / cav_var;
        if !(tm.normalizer() >= self.hyper.tilted_floor) || !tm.mean.is_finite() {
            self.counters.skipped_updates += 1;
            return None;
        }
        let var = tm.variance.max(VARIANCE_FLOOR * cav_var);
        let precision = 1.0 / var - cav_precision;
        if precision > 0.0 {
            Some((precision, tm.mean / var - cav_precision * cav_mean))
        } else {
            self.counters.negative_variances += 1;
            let p = 1.0 / self.hyper.neg_var_replacement;
            Some((p, p * tm.mean))
        }
    }

    /// Refines the spatial coupling `r_t` in both directions.
    pub fn update_r(&mut self, t: usize) -> Result<()> {
        self.check_t(t)?;
        let (to_gamma, to_mu) = match r_messages(&self.h_natural(t), &self.mu_cavity_r(t), &self.sigma0) {
            Ok(msgs) => msgs,
            Err(Error::NotPositiveDefinite { .. }) => {
                self.counters.improper_marginals += 1;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let eta = self.eta;
        self.r_gamma.write(t, to_gamma, eta)?;
        self.r_mu.write(t, to_mu, eta)?;
        if !(self.r_gamma.is_finite(t) && self.r_mu.is_finite(t)) {
            return Err(Error::NonFinite {
                factor: "r",
                timestamp: t,
                component: None,
            });
        }
        Ok(())
    }

    /// Refines the chain link between `μ_{t−1}` and `μ_t`; requires `t ≥ 1`.
    pub fn update_u(&mut self, t: usize) -> Result<()> {
        self.check_t(t)?;
        if t == 0 {
            return Err(Error::invalid("t", "the chain factor needs t ≥ 1"));
        }
        let mut prev = self.r_mu.natural(t - 1);
        self.add_chain(t - 1, true, false, &mut prev);
        let mut cur = self.r_mu.natural(t);
        self.add_chain(t, false, true, &mut cur);
        let (fwd, bwd) = match u_messages(&prev, &cur, &self.w) {
            Ok(msgs) => msgs,
            Err(Error::NotPositiveDefinite { .. }) => {
                self.counters.improper_marginals += 1;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let eta = self.eta;
        self.u_fwd.write(t - 1, fwd, eta)?;
        self.u_bwd.write(t - 1, bwd, eta)?;
        if !(self.u_fwd.is_finite(t - 1) && self.u_bwd.is_finite(t - 1)) {
            return Err(Error::NonFinite {
                factor: "u",
                timestamp: t,
                component: None,
            });
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_len {
            return Err(Error::invalid("t", format!("{t} is outside 0..{}", self.t_len)));
        }
        Ok(())
    }

    /// One sweep `f → h → r → u` over all timestamps at the current damping.
    /// Decays η afterwards.
    pub fn sweep(&mut self) -> Result<SweepRecord> {
        let start = Instant::now();
        let old = self.x_mean.clone();
        self.counters = Counters::default();
        let eta = self.eta;
        for t in 0..self.t_len {
            self.update_f(t)?;
            self.update_h(t)?;
            self.update_r(t)?;
            if t > 0 {
                self.update_u(t)?;
            }
        }
        self.iteration += 1;
        self.eta *= self.hyper.xi;
        Ok(SweepRecord {
            iteration: self.iteration,
            change: relative_change(&self.x_mean, &old),
            eta,
            negative_variances: self.counters.negative_variances,
            skipped_updates: self.counters.skipped_updates,
            improper_marginals: self.counters.improper_marginals,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Sweeps until the relative change of `X̂` drops below the tolerance in
    /// a sweep where every factor could be refined, or the sweep budget runs out.
    pub fn run(&mut self) -> Result<Diagnostics> {
        let start = Instant::now();
        let mut diag = Diagnostics::default();
        while diag.iterations < self.hyper.max_iterations {
            let rec = self.sweep()?;
            diag.iterations += 1;
            diag.sweeps.push(rec);
            if rec.change < self.hyper.tolerance && rec.improper_marginals == 0 {
                diag.converged = true;
                break;
            }
        }
        diag.wall_time_secs = start.elapsed().as_secs_f64();
        Ok(diag)
    }

    /// Marginal summaries for every timestamp.
    pub fn summary(&self) -> Result<PosteriorSummary> {
        let (n, tl) = (self.n, self.t_len);
        let mut s = PosteriorSummary {
            x_mean: self.x_mean.clone(),
            x_var: DMatrix::zeros(n, tl),
            spike_prob: DMatrix::zeros(n, tl),
            spike_logit: DMatrix::zeros(n, tl),
            spike_score: DMatrix::zeros(n, tl),
            gamma_mean: DMatrix::from_element(n, tl, f64::NAN),
            mu_mean: DMatrix::from_element(n, tl, f64::NAN),
        };
        for t in 0..tl {
            let m = self.x_marginal(t);
            let (_, var) = mean_and_variance(&cholesky_with_jitter(&m.precision)?, &m.shift);
            s.x_var.set_column(t, &var);
            for i in 0..n {
                let l = self.spike_logit(i, t);
                s.spike_logit[(i, t)] = l;
                s.spike_score[(i, t)] = logit_to_score(l);
                s.spike_prob[(i, t)] = log_sigmoid(l).exp();
            }
            let g = self.gamma_marginal(t);
            if let Some(chol) = g.precision.clone().cholesky() {
                s.gamma_mean.set_column(t, &chol.solve(&g.shift));
            }
            let mu = self.mu_marginal(t);
            if let Some(chol) = mu.precision.clone().cholesky() {
                s.mu_mean.set_column(t, &chol.solve(&mu.shift));
            }
        }
        Ok(s)
    }
}

/// Runs batch EP to convergence from the default initial state.
pub fn run_offline(d: &Dataset, h: &Hyperparams) -> Result<(EpState, PosteriorSummary, Diagnostics)> {
    let mut state = init_state(d, h)?;
    let diag = state.run()?;
    let summary = state.summary()?;
    Ok((state, summary, diag))
}

/// Messages of the spatial factor `N(γ; μ, Σ₀)`, returned as `(to γ, to μ)`.
///
/// Projecting the tilted joint onto Gaussians and dividing out the cavity
/// leaves each message as the opposite cavity pushed through the coupling,
/// i.e. that cavity convolved with `Σ₀`.
pub fn r_messages(
    gamma_cavity: &GaussianNat,
    mu_cavity: &GaussianNat,
    sigma0: &DMatrix<f64>,
) -> Result<(GaussianNat, GaussianNat)> {
    Ok((mu_cavity.convolve(sigma0)?, gamma_cavity.convolve(sigma0)?))
}

/// Messages of the chain factor `N(μ_t; μ_{t−1}, W)`, returned as
/// `(onto μ_t, onto μ_{t−1})`.
pub fn u_messages(
    prev_cavity: &GaussianNat,
    cur_cavity: &GaussianNat,
    w: &DMatrix<f64>,
) -> Result<(GaussianNat, GaussianNat)> {
    Ok((prev_cavity.convolve(w)?, cur_cavity.convolve(w)?))
}

fn damp_logit(new: f64, old: f64, eta: f64) -> f64 {
    if eta >= 1.0 {
        new
    } else {
        eta * new + (1.0 - eta) * old
    }
}

/// `‖new − old‖ / ‖old‖` in the max-abs-entry norm; 0 for two zero matrices.
pub fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let num = (new - old).amax();
    let den = old.amax();
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Means and variances of a marginal, frozen for one parallel refinement pass.
struct Snapshot {
    mean: DVector<f64>,
    var: DVector<f64>,
}

impl Snapshot {
    fn new(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, shift: &DVector<f64>) -> Self {
        let (mean, var) = mean_and_variance(chol, shift);
        Self { mean, var }
    }

    /// Scalar cavity `(mean, variance)` of component `i` with the diagonal
    /// factor `(precision, shift)` removed, if proper.
    fn cavity(&self, i: usize, precision: f64, shift: f64) -> Option<(f64, f64)> {
        let v = self.var[i];
        let cav_precision = 1.0 / v - precision;
        if !(cav_precision > 0.0) {
            return None;
        }
        let cav_var = 1.0 / cav_precision;
        Some(((self.mean[i] / v - shift) * cav_var, cav_var))
    }
}

fn cholesky_with_jitter(
    precision: &DMatrix<f64>,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = precision.clone().cholesky() {
        return Ok(c);
    }
    let scale = precision.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut jittered = precision.clone();
    for i in 0..jittered.nrows() {
        jittered[(i, i)] += ASSEMBLY_JITTER * scale;
    }
    jittered
        .cholesky()
        .ok_or_else(|| crate::expfam::not_pd(precision))
}

/// Mean and marginal variances of the Gaussian with factored precision `LLᵀ`.
/// The variances are the squared column norms of `L⁻¹`.
fn mean_and_variance(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    shift: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = shift.len();
    let mean = chol.solve(shift);
    let mut inv = DMatrix::<f64>::identity(n, n);
    chol.l().solve_lower_triangular_mut(&mut inv);
    let var = DVector::from_fn(n, |i, _| inv.column(i).norm_squared());
    (mean, var)
}

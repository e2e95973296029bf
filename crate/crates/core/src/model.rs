//! The generative model as a forward sampler, the structured synthetic-signal
//! generator, and dataset containers.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with a
//! `u64`, with one ChaCha stream per purpose (see [`RngStream`]), so a seed
//! reproduces the same draws on every platform.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::expfam::probit;
use crate::kernels::{ensure_psd, DipoleLayout, KernelSpec};

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Latent = 0,
    Groups = 1,
    Design = 2,
    Noise = 3,
}

pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Model constants and inference controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Observation noise variance σ².
    pub noise_var: f64,
    /// Slab variance σ_x².
    pub slab_var: f64,
    /// Spatial GP covariance Σ₀ (α_Σ, ℓ_Σ).
    pub spatial: KernelSpec,
    /// Temporal GP increment covariance W (α_W, ℓ_W).
    pub temporal: KernelSpec,
    /// Initial damping coefficient η.
    pub eta: f64,
    /// Per-sweep damping decay ξ.
    pub xi: f64,
    /// Relative ∞-norm change of the signal estimate that ends iteration.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Variance substituted for negative factor variances.
    pub neg_var_replacement: f64,
    /// Tilted normalisers below this skip the update.
    pub tilted_floor: f64,
    /// Mean μ₀ of the prior `μ₁ ~ N(μ₀·1, W)`.
    pub mu_prior_mean: f64,
    /// One approximating covariance per timestamp instead of a shared one.
    pub per_timestamp_covariances: bool,
}

impl Hyperparams {
    /// Synthetic-data profile of the two-level GP hyperparameter table.
    pub fn synthetic() -> Self {
        Self::with_table(1e4, 1e-4, 0.999, 0.9999, 15.0, 10.0, 10.0, 10.0)
    }

    /// Video (Convoy) profile of the hyperparameter table.
    pub fn convoy() -> Self {
        Self::with_table(160.0, 4.0, 0.99, 0.999, 15.0, 10.0, 10.0, 10.0)
    }

    /// EEG profile; both kernels use the dipole distance over `layout`.
    pub fn eeg(layout: DipoleLayout) -> Self {
        let mut h = Self::with_table(4e5, 1e-3, 0.9, 0.8, 22.17, 0.2217, 1e-2, 0.05);
        h.spatial = KernelSpec::dipole(layout.clone(), 0.05, 0.2217);
        h.temporal = KernelSpec::dipole(layout, 1e-2, 22.17);
        h
    }

    #[allow(clippy::too_many_arguments)]
    fn with_table(
        slab_var: f64,
        noise_var: f64,
        eta: f64,
        xi: f64,
        ell_w: f64,
        ell_sigma: f64,
        alpha_w: f64,
        alpha_sigma: f64,
    ) -> Self {
        Self {
            noise_var,
            slab_var,
            spatial: KernelSpec::squared_exponential(alpha_sigma, ell_sigma),
            temporal: KernelSpec::squared_exponential(alpha_w, ell_w),
            eta,
            xi,
            tolerance: 1e-3,
            max_iterations: 200,
            neg_var_replacement: 1e10,
            tilted_floor: 1e-12,
            mu_prior_mean: 0.0,
            per_timestamp_covariances: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("sigma2", self.noise_var)?;
        positive("sigma_x2", self.slab_var)?;
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid("eta", format!("must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::invalid("xi", format!("must lie in (0, 1], got {}", self.xi)));
        }
        positive("tolerance", self.tolerance)?;
        positive("neg_var_replacement", self.neg_var_replacement)?;
        if !(self.tilted_floor >= 0.0) {
            return Err(Error::invalid("tilted_floor", "must be nonnegative"));
        }
        if !self.mu_prior_mean.is_finite() {
            return Err(Error::invalid("mu_prior_mean", "must be finite"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        self.spatial.validate()?;
        self.temporal.validate()
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

/// Design matrix, observations and optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `K × N` design matrix A.
    pub design: DMatrix<f64>,
    /// `K × T` observations Y.
    pub observations: DMatrix<f64>,
    /// `N × T` true signal X.
    pub signal: Option<DMatrix<f64>>,
    /// `N × T` spike indicators Ω (`true` = spike, component is zero).
    pub spikes: Option<DMatrix<bool>>,
}

impl Dataset {
    pub fn new(design: DMatrix<f64>, observations: DMatrix<f64>) -> Result<Self> {
        if design.nrows() != observations.nrows() {
            return Err(Error::DimensionMismatch {
                context: "observations rows vs design rows",
                expected: design.nrows(),
                actual: observations.nrows(),
            });
        }
        if design.nrows() == 0 || design.ncols() == 0 || observations.ncols() == 0 {
            return Err(Error::invalid("dataset", "dimensions must be at least 1"));
        }
        Ok(Self {
            design,
            observations,
            signal: None,
            spikes: None,
        })
    }

    pub fn with_truth(mut self, signal: DMatrix<f64>, spikes: Option<DMatrix<bool>>) -> Result<Self> {
        let shape = (self.n(), self.t_len());
        if signal.shape() != shape {
            return Err(Error::invalid(
                "signal",
                format!("expected {shape:?}, got {:?}", signal.shape()),
            ));
        }
        let spikes = spikes.unwrap_or_else(|| signal.map(|v| v == 0.0));
        if spikes.shape() != shape {
            return Err(Error::invalid("spikes", "shape does not match the signal"));
        }
        self.signal = Some(signal);
        self.spikes = Some(spikes);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.design.ncols()
    }

    pub fn k(&self) -> usize {
        self.design.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.observations.ncols()
    }

    /// Timestamps `start..start + len` (truth included when present).
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.t_len() {
            return Err(Error::invalid(
                "window",
                format!("{start}..{} outside 0..{}", start + len, self.t_len()),
            ));
        }
        Ok(Self {
            design: self.design.clone(),
            observations: self.observations.columns(start, len).into_owned(),
            signal: self.signal.as_ref().map(|s| s.columns(start, len).into_owned()),
            spikes: self.spikes.as_ref().map(|s| s.columns(start, len).into_owned()),
        })
    }
}

/// All latent variables of one generative draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    pub signal: DMatrix<f64>,
    pub spikes: DMatrix<bool>,
    pub gamma: DMatrix<f64>,
    pub mu: DMatrix<f64>,
}

fn normal_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn cholesky_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let psd = ensure_psd(cov, 0.0)?;
    Ok(psd.cholesky().expect("ensure_psd guarantees a factorization").unpack())
}

/// Draws every latent variable and the observations from the hierarchical model:
/// `μ₁ ~ N(μ₀·1, W)`, `μ_t ~ N(μ_{t−1}, W)`, `γ_t ~ N(μ_t, Σ₀)`,
/// `ω_it ~ Ber(Φ(γ_it))`, `x_it = 0` if `ω_it = 1` else `N(0, σ_x²)`,
/// `y_t = A x_t + N(0, σ²I)` with A iid standard normal.
pub fn sample_generative(
    h: &Hyperparams,
    n: usize,
    t_len: usize,
    k: usize,
    seed: u64,
) -> Result<(Dataset, LatentTruth)> {
    if n == 0 || t_len == 0 || k == 0 {
        return Err(Error::invalid("dimensions", "N, T and K must be at least 1"));
    }
    let sigma0_chol = cholesky_factor(&h.spatial.build(n)?)?;
    let w_chol = cholesky_factor(&h.temporal.build(n)?)?;
    let mut rng = seeded_rng(seed, RngStream::Latent);

    let mut mu = DMatrix::zeros(n, t_len);
    let mut gamma = DMatrix::zeros(n, t_len);
    let mut spikes = DMatrix::from_element(n, t_len, false);
    let mut signal = DMatrix::zeros(n, t_len);
    let slab_sd = h.slab_var.sqrt();
    let mut prev = DVector::from_element(n, h.mu_prior_mean);
    for t in 0..t_len {
        let mu_t = &prev + &w_chol * normal_vector(&mut rng, n);
        let gamma_t = &mu_t + &sigma0_chol * normal_vector(&mut rng, n);
        for i in 0..n {
            let spike = rng.random::<f64>() < probit(gamma_t[i]);
            spikes[(i, t)] = spike;
            let slab: f64 = rng.sample(StandardNormal);
            signal[(i, t)] = if spike { 0.0 } else { slab_sd * slab };
        }
        mu.set_column(t, &mu_t);
        gamma.set_column(t, &gamma_t);
        prev = mu_t;
    }

    let design = make_design_matrix(k, n, seed);
    let observations = observe(&design, &signal, h.noise_var, seed)?;
    let dataset = Dataset::new(design, observations)?.with_truth(signal.clone(), Some(spikes.clone()))?;
    Ok((
        dataset,
        LatentTruth {
            signal,
            spikes,
            gamma,
            mu,
        },
    ))
}

/// Parameters of the moving-groups synthetic signal.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupConfig {
    pub n: usize,
    pub t_len: usize,
    pub n_groups: usize,
    pub target_sparsity: f64,
    pub value_variance: f64,
    /// Probability that a border moves up (and, separately, down) at each step.
    pub move_prob: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            n: 100,
            t_len: 50,
            n_groups: 2,
            target_sparsity: 0.95,
            value_variance: 1e4,
            move_prob: 0.1,
        }
    }
}

impl GroupConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_len == 0 || self.n_groups == 0 {
            return Err(Error::invalid("groups", "N, T and n_groups must be at least 1"));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return Err(Error::invalid("target_sparsity", "must lie in (0, 1)"));
        }
        if !(self.value_variance > 0.0) {
            return Err(Error::invalid("value_variance", "must be positive"));
        }
        if !(self.move_prob >= 0.0 && self.move_prob <= 1.0 / 3.0) {
            return Err(Error::invalid("move_prob", "must lie in [0, 1/3]"));
        }
        Ok(())
    }
}

/// Draws one border step: `-1` with `p_down`, `+1` with `p_up`, `0` otherwise.
pub fn sample_border_step<R: Rng>(rng: &mut R, p_down: f64, p_up: f64) -> i64 {
    let u: f64 = rng.random();
    if u < p_down {
        -1
    } else if u < p_down + p_up {
        1
    } else {
        0
    }
}

/// Slab mask and values for contiguous groups whose borders random-walk in time.
///
/// At the first timestamp `n_groups` intervals get Poisson lengths with mean
/// `N·(1 − target_sparsity)/n_groups` (zero draws rejected) and uniform positions.
/// Afterwards every border steps −1/0/+1 with probabilities `p/1−2p/p`; when the
/// slab count is more than 10% away from its target, half of `p` is shifted from
/// the moves that push away from the target to the moves that pull back.
/// Intervals are clipped to `[0, N)` and keep at least one element; overlapping
/// intervals are merged in the mask. Slab values are iid `N(0, value_variance)`.
/// Returns `(X, Ω)` with `Ω = true` at spikes.
pub fn generate_structured_groups(cfg: &GroupConfig, seed: u64) -> Result<(DMatrix<f64>, DMatrix<bool>)> {
    cfg.validate()?;
    let n = cfg.n;
    let mut rng = seeded_rng(seed, RngStream::Groups);
    let target_count = n as f64 * (1.0 - cfg.target_sparsity);
    let mean_len = (target_count / cfg.n_groups as f64).max(f64::MIN_POSITIVE);
    let poisson = Poisson::new(mean_len).map_err(|e| Error::invalid("poisson mean", e.to_string()))?;

    // half-open intervals [start, end)
    let mut groups: Vec<(i64, i64)> = (0..cfg.n_groups)
        .map(|_| {
            let len = loop {
                let draw: f64 = poisson.sample(&mut rng);
                if draw >= 1.0 {
                    break (draw as usize).min(n) as i64;
                }
            };
            let start = rng.random_range(0..=(n as i64 - len));
            (start, start + len)
        })
        .collect();

    let mut spikes = DMatrix::from_element(n, cfg.t_len, true);
    let p = cfg.move_prob;
    for t in 0..cfg.t_len {
        if t > 0 {
            let count = slab_count(&groups, n) as f64;
            // +1: grow, -1: shrink, 0: neutral
            let drift = if count > 1.1 * target_count {
                -1.0
            } else if count < 0.9 * target_count {
                1.0
            } else {
                0.0
            };
            let (p_grow, p_shrink) = (p + 0.5 * p * drift, p - 0.5 * p * drift);
            for g in groups.iter_mut() {
                // start moves down to grow, end moves up to grow
                let start = g.0 + sample_border_step(&mut rng, p_grow, p_shrink);
                let end = g.1 + sample_border_step(&mut rng, p_shrink, p_grow);
                let start = start.clamp(0, n as i64 - 1);
                let end = end.clamp(start + 1, n as i64);
                *g = (start, end);
            }
        }
        for &(s, e) in &groups {
            for i in s..e {
                spikes[(i as usize, t)] = false;
            }
        }
    }

    let mut signal = DMatrix::zeros(n, cfg.t_len);
    let sd = cfg.value_variance.sqrt();
    for t in 0..cfg.t_len {
        for i in 0..n {
            if !spikes[(i, t)] {
                let v: f64 = rng.sample(StandardNormal);
                // an exact zero draw would break the spike ⇔ zero invariant
                signal[(i, t)] = if v == 0.0 { f64::MIN_POSITIVE } else { sd * v };
            }
        }
    }
    Ok((signal, spikes))
}

fn slab_count(groups: &[(i64, i64)], n: usize) -> usize {
    let mut mask = vec![false; n];
    for &(s, e) in groups {
        for slot in &mut mask[s as usize..e as usize] {
            *slot = true;
        }
    }
    mask.into_iter().filter(|&b| b).count()
}

/// `K × N` matrix with iid standard-normal entries.
pub fn make_design_matrix(k: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded_rng(seed, RngStream::Design);
    DMatrix::from_fn(k, n, |_, _| rng.sample(StandardNormal))
}

/// `Y = A X + E` with `E` iid `N(0, noise_var)`; `noise_var = 0` gives `Y = A X` exactly.
pub fn observe(design: &DMatrix<f64>, signal: &DMatrix<f64>, noise_var: f64, seed: u64) -> Result<DMatrix<f64>> {
    if design.ncols() != signal.nrows() {
        return Err(Error::DimensionMismatch {
            context: "observe: design columns vs signal rows",
            expected: design.ncols(),
            actual: signal.nrows(),
        });
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::invalid("noise_var", "must be nonnegative"));
    }
    let mut y = design * signal;
    if noise_var > 0.0 {
        let mut rng = seeded_rng(seed, RngStream::Noise);
        let sd = noise_var.sqrt();
        for v in y.iter_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(y)
}

/// Number of measurements for an undersampling ratio `K/N`.
pub fn measurements_for_ratio(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).max(1)
}

/// The moving-groups benchmark instance: structured signal, Gaussian design with
/// `K = round(ratio·N)` rows, noiseless observations.
pub fn synthetic_instance(cfg: &GroupConfig, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("ratio", format!("must lie in (0, 1], got {ratio}")));
    }
    let (signal, spikes) = generate_structured_groups(cfg, seed)?;
    let k = measurements_for_ratio(cfg.n, ratio);
    let design = make_design_matrix(k, cfg.n, seed);
    let observations = observe(&design, &signal, 0.0, seed)?;
    Dataset::new(design, observations)?.with_truth(signal, Some(spikes))
}

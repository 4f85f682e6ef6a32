//! Gibbs sampler for the stable spline horseshoe hierarchy: per-module
//! Gaussian draws through precomputed eigenfactors, conjugate inverse-gamma
//! updates for every variance and auxiliary, chain orchestration and
//! posterior summarization.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::{sample_inverse_gamma, InverseGammaParams, RngStream};
use crate::error::{Error, Result};
use crate::evidence::{EvidenceEvaluator, EvidenceTrace};
use crate::kernel::StableSplineKernel;
use crate::netsim::NetworkDataset;
use crate::regressors::{RegressorSet, Residual};

/// Inverse-gamma scale parameters are floored here to keep draws finite in
/// pathological double-precision corners; floor events are counted.
pub const SCALE_FLOOR: f64 = 1e-300;

/// Below this value of τ²λₖ² the module draw degenerates to the zero vector.
pub const SHRINKAGE_UNDERFLOW: f64 = 1e-300;

/// Per-module factors cached before the chain starts: the
/// eigendecomposition `U·diag(D)·Uᵀ = Mᵀ·Gᵀₖ·Gₖ·M` (M the kernel factor),
/// plus the products needed to draw θₖ without any factorization in the
/// sweep loop.
#[derive(Debug, Clone)]
pub struct ModulePrecomp {
    index: usize,
    /// Eigenvalues of the whitened Gram matrix, clamped at zero.
    eigvals: DVector<f64>,
    /// Orthogonal eigenvectors U.
    eigvecs: DMatrix<f64>,
    /// Cached `M·U`.
    factor_times_eigvecs: DMatrix<f64>,
    /// Cached `Gᵀₖ·Gₖ`.
    gram: DMatrix<f64>,
}

impl ModulePrecomp {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn factor_times_eigvecs(&self) -> &DMatrix<f64> {
        &self.factor_times_eigvecs
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }
}

/// Eigendecomposition of the whitened Gram matrix of one module.
///
/// `MᵀGᵀₖGₖM` is symmetric positive semidefinite, so a symmetric
/// eigendecomposition with eigenvalues clamped at zero realizes the
/// factorization needed for the conditional draws.
pub fn precompute_module(
    g_k: &DMatrix<f64>,
    kernel: &StableSplineKernel,
    index: usize,
) -> Result<ModulePrecomp> {
    let m = kernel.m();
    if g_k.ncols() != m {
        return Err(Error::Shape(format!(
            "module {index}: regressor has {} columns, kernel size is {m}",
            g_k.ncols()
        )));
    }
    let gm = g_k * kernel.factor(); // n×m
    let mut whitened = DMatrix::<f64>::zeros(m, m);
    whitened.gemm_tr(1.0, &gm, &gm, 0.0); // MᵀGᵀGM
    // Symmetrize away rounding asymmetry before the eigensolver.
    let whitened = (&whitened + whitened.transpose()) * 0.5;

    let mut gram = DMatrix::<f64>::zeros(m, m);
    gram.gemm_tr(1.0, g_k, g_k, 0.0);

    let eig = nalgebra::SymmetricEigen::try_new(whitened, f64::EPSILON, 0).ok_or_else(|| {
        Error::Numerical(format!(
            "eigendecomposition of module {index} whitened Gram matrix did not converge"
        ))
    })?;
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = 1e-10 * (1.0 + max_eig);
    let mut eigvals = eig.eigenvalues;
    for d in eigvals.iter_mut() {
        if *d < -tol {
            return Err(Error::Numerical(format!(
                "module {index}: whitened Gram matrix has eigenvalue {d}, below -{tol}"
            )));
        }
        if *d < 0.0 {
            *d = 0.0;
        }
    }
    let factor_times_eigvecs = kernel.factor() * &eig.eigenvectors;
    Ok(ModulePrecomp {
        index,
        eigvals,
        eigvecs: eig.eigenvectors,
        factor_times_eigvecs,
        gram,
    })
}

/// Precomputes every module, in parallel across modules.
pub fn precompute_all(
    regressors: &RegressorSet,
    kernel: &StableSplineKernel,
) -> Result<Vec<ModulePrecomp>> {
    regressors
        .modules()
        .par_iter()
        .enumerate()
        .map(|(k, g)| precompute_module(g, kernel, k))
        .collect()
}

/// Prior on the noise variance σ².
///
/// The default is the scale-invariant improper prior dσ²/σ²; a proper
/// inverse-gamma is available for workflows that must draw σ² from its
/// prior (an improper one cannot be sampled). `InverseGamma(a, b)` turns
/// the conditional into `Ig(n/2 + a, ‖r‖²/2 + b)`; Jeffreys is the
/// (a, b) → 0 limit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub enum Sigma2Prior {
    #[default]
    Jeffreys,
    InverseGamma {
        shape: f64,
        scale: f64,
    },
}

/// One Gibbs state: module coefficients, shrinkage scales, auxiliaries,
/// noise variance and the running residual.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub thetas: Vec<DVector<f64>>,
    pub lambda2: Vec<f64>,
    pub nu: Vec<f64>,
    pub tau2: f64,
    pub xi: f64,
    pub sigma2: f64,
    pub residual: Residual,
}

/// Chain run configuration. The θ start value mirrors the reference
/// experiments (10⁻⁴ everywhere); every scale starts at the half-Cauchy
/// median 1.
#[derive(Debug, Clone, Serialize)]
pub struct ChainConfig {
    pub n_iters: usize,
    pub burn_in_fraction: f64,
    pub thin: usize,
    pub theta_init_value: f64,
    pub variance_init: f64,
    pub seed: u64,
    /// Evaluate the optimized marginal likelihood every this many
    /// post-burn-in sweeps.
    pub evidence_stride: Option<usize>,
    /// Recompute the residual from scratch this often to bound float drift.
    pub residual_refresh_every: usize,
    /// Cap on retained θ samples (for credible bands); the θ storage stride
    /// widens as needed. Zero disables θ sample storage.
    pub max_theta_samples: usize,
    pub sigma2_prior: Sigma2Prior,
}

impl ChainConfig {
    pub fn new(n_iters: usize, seed: u64) -> Self {
        Self {
            n_iters,
            burn_in_fraction: 0.25,
            thin: 10,
            theta_init_value: 1e-4,
            variance_init: 1.0,
            seed,
            evidence_stride: None,
            residual_refresh_every: 1000,
            max_theta_samples: 2000,
            sigma2_prior: Sigma2Prior::Jeffreys,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Parameter("chain needs at least one sweep".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Parameter(format!(
                "burn-in fraction {} outside [0, 1)",
                self.burn_in_fraction
            )));
        }
        if self.thin == 0 {
            return Err(Error::Parameter("thinning stride must be >= 1".into()));
        }
        if self.residual_refresh_every == 0 {
            return Err(Error::Parameter(
                "residual refresh period must be >= 1".into(),
            ));
        }
        if self.evidence_stride == Some(0) {
            return Err(Error::Parameter("evidence stride must be >= 1".into()));
        }
        if !(self.variance_init.is_finite() && self.variance_init > 0.0) {
            return Err(Error::Parameter(format!(
                "variance initialization must be positive, got {}",
                self.variance_init
            )));
        }
        Ok(())
    }

    pub fn burn_in_sweeps(&self) -> usize {
        (self.n_iters as f64 * self.burn_in_fraction).floor() as usize
    }
}

// ---------------------------------------------------------------------------
// Full-conditional parameters (pure readoffs of the hierarchy)
// ---------------------------------------------------------------------------

/// σ² | · : shape and scale of the inverse-gamma conditional.
pub fn sigma2_conditional(n: usize, residual_ss: f64, prior: &Sigma2Prior) -> (f64, f64) {
    match prior {
        Sigma2Prior::Jeffreys => (n as f64 / 2.0, residual_ss / 2.0),
        Sigma2Prior::InverseGamma { shape, scale } => {
            (n as f64 / 2.0 + shape, residual_ss / 2.0 + scale)
        }
    }
}

/// λₖ² | · : `Ig((m+1)/2, 1/νₖ + ‖θₖ‖²_K/(2τ²))`.
pub fn lambda2_conditional(m: usize, nu_k: f64, tau2: f64, kernel_norm_k: f64) -> (f64, f64) {
    (
        (m as f64 + 1.0) / 2.0,
        1.0 / nu_k + kernel_norm_k / (2.0 * tau2),
    )
}

/// τ² | · : `Ig((mp+1)/2, 1/ξ + Σₖ ‖θₖ‖²_K/(2λₖ²))`; pass Σₖ ‖θₖ‖²_K/λₖ².
pub fn tau2_conditional(m: usize, p: usize, xi: f64, sum_norm_over_lambda2: f64) -> (f64, f64) {
    (
        ((m * p) as f64 + 1.0) / 2.0,
        1.0 / xi + sum_norm_over_lambda2 / 2.0,
    )
}

/// νₖ | · : `Ig(1, 1 + 1/λₖ²)`.
pub fn nu_conditional(lambda2_k: f64) -> (f64, f64) {
    (1.0, 1.0 + 1.0 / lambda2_k)
}

/// ξ | · : `Ig(1, 1 + 1/τ²)`.
pub fn xi_conditional(tau2: f64) -> (f64, f64) {
    (1.0, 1.0 + 1.0 / tau2)
}

// ---------------------------------------------------------------------------
// The sampler
// ---------------------------------------------------------------------------

/// One Gibbs chain over a fixed dataset. Strictly sequential; parallel
/// chains take independent [`RngStream`]s.
pub struct GibbsSampler<'a> {
    regressors: &'a RegressorSet,
    kernel: &'a StableSplineKernel,
    precomp: &'a [ModulePrecomp],
    y: DVector<f64>,
    state: ChainState,
    rng: RngStream,
    sigma2_prior: Sigma2Prior,
    floor_events: u64,
    buf_b: DVector<f64>,
    buf_c: DVector<f64>,
    buf_theta: DVector<f64>,
}

impl<'a> GibbsSampler<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        regressors: &'a RegressorSet,
        kernel: &'a StableSplineKernel,
        precomp: &'a [ModulePrecomp],
        y: DVector<f64>,
        theta_init_value: f64,
        variance_init: f64,
        sigma2_prior: Sigma2Prior,
        rng: RngStream,
    ) -> Result<Self> {
        let (n, m, p) = (regressors.n(), regressors.m(), regressors.p());
        if y.len() != n {
            return Err(Error::Shape(format!(
                "output vector has length {}, regressors have {n} rows",
                y.len()
            )));
        }
        if kernel.m() != m {
            return Err(Error::Shape(format!(
                "kernel size {} does not match FIR length {m}",
                kernel.m()
            )));
        }
        if precomp.len() != p {
            return Err(Error::Shape(format!(
                "{} precomputed modules for {p} regressors",
                precomp.len()
            )));
        }
        if !(variance_init.is_finite() && variance_init > 0.0) {
            return Err(Error::Parameter(format!(
                "variance initialization must be positive, got {variance_init}"
            )));
        }
        let thetas = vec![DVector::from_element(m, theta_init_value); p];
        let residual = Residual::compute(&y, regressors, &thetas)?;
        let state = ChainState {
            thetas,
            lambda2: vec![variance_init; p],
            nu: vec![variance_init; p],
            tau2: variance_init,
            xi: variance_init,
            sigma2: variance_init,
            residual,
        };
        Ok(Self {
            regressors,
            kernel,
            precomp,
            y,
            state,
            rng,
            sigma2_prior,
            floor_events: 0,
            buf_b: DVector::zeros(m),
            buf_c: DVector::zeros(m),
            buf_theta: DVector::zeros(m),
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn floor_events(&self) -> u64 {
        self.floor_events
    }

    pub fn rng_mut(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.y
    }

    /// Replaces the outputs (e.g. when resimulating data) and recomputes the
    /// residual.
    pub fn set_outputs(&mut self, y: DVector<f64>) -> Result<()> {
        if y.len() != self.regressors.n() {
            return Err(Error::Shape(format!(
                "output vector has length {}, regressors have {} rows",
                y.len(),
                self.regressors.n()
            )));
        }
        self.y = y;
        self.refresh_residual()
    }

    /// Overwrites the module coefficients and recomputes the residual.
    pub fn set_thetas(&mut self, thetas: Vec<DVector<f64>>) -> Result<()> {
        self.state.residual = Residual::compute(&self.y, self.regressors, &thetas)?;
        self.state.thetas = thetas;
        Ok(())
    }

    /// Overwrites the scale variables (all must be strictly positive).
    pub fn set_scales(
        &mut self,
        lambda2: Vec<f64>,
        nu: Vec<f64>,
        tau2: f64,
        xi: f64,
        sigma2: f64,
    ) -> Result<()> {
        let p = self.regressors.p();
        if lambda2.len() != p || nu.len() != p {
            return Err(Error::Shape(format!("scale vectors must have length {p}")));
        }
        for &v in lambda2
            .iter()
            .chain(nu.iter())
            .chain([tau2, xi, sigma2].iter())
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!(
                    "scale variables must be strictly positive, got {v}"
                )));
            }
        }
        self.state.lambda2 = lambda2;
        self.state.nu = nu;
        self.state.tau2 = tau2;
        self.state.xi = xi;
        self.state.sigma2 = sigma2;
        Ok(())
    }

    /// Recomputes the residual from scratch.
    pub fn refresh_residual(&mut self) -> Result<()> {
        self.state.residual = Residual::compute(&self.y, self.regressors, &self.state.thetas)?;
        Ok(())
    }

    fn draw_inverse_gamma(&mut self, shape: f64, scale: f64) -> f64 {
        let scale = if scale < SCALE_FLOOR {
            self.floor_events += 1;
            SCALE_FLOOR
        } else {
            scale
        };
        let params =
            InverseGammaParams::new(shape, scale).expect("floored conditional parameters");
        sample_inverse_gamma(params, &mut self.rng)
    }

    /// Draws θₖ from its exact Gaussian full conditional
    /// `N(μ̂ₖ, (GᵀₖGₖ/σ² + K⁻¹/(τ²λₖ²))⁻¹)` and updates the residual
    /// incrementally. No factorization happens here; cost O(m² + n·m).
    ///
    /// When τ²λₖ² underflows below [`SHRINKAGE_UNDERFLOW`] the draw
    /// degenerates to the zero vector (documented behavior, not an error).
    pub fn sample_theta(&mut self, k: usize) -> Result<()> {
        let p = self.regressors.p();
        if k >= p {
            return Err(Error::Shape(format!("module index {k} out of range ({p})")));
        }
        let pc = &self.precomp[k];
        let g_k = self.regressors.module(k);
        let scale_product = self.state.tau2 * self.state.lambda2[k];

        if scale_product < SHRINKAGE_UNDERFLOW {
            self.buf_theta.fill(0.0);
        } else {
            let shift = self.state.sigma2 / scale_product; // σ²/(τ²λₖ²)
            let sigma = self.state.sigma2.sqrt();

            // b = Gᵀₖ·(Y − Σ_{j≠k} Gⱼθⱼ) = Gᵀₖ·r + (GᵀₖGₖ)·θₖ
            self.buf_b
                .gemv_tr(1.0, g_k, self.state.residual.vector(), 0.0);
            self.buf_b.gemv(1.0, &pc.gram, &self.state.thetas[k], 1.0);

            // Whitened coordinates: ζ = (D+s)⁻¹·Wᵀb + σ·(D+s)^(-1/2)·ω
            self.buf_c
                .gemv_tr(1.0, &pc.factor_times_eigvecs, &self.buf_b, 0.0);
            for i in 0..self.buf_c.len() {
                let denom = pc.eigvals[i] + shift;
                let omega: f64 = self.rng.standard_normal();
                self.buf_c[i] = self.buf_c[i] / denom + sigma * omega / denom.sqrt();
            }
            self.buf_theta
                .gemv(1.0, &pc.factor_times_eigvecs, &self.buf_c, 0.0);
        }

        self.state
            .residual
            .swap_module(g_k, &self.state.thetas[k], &self.buf_theta)?;
        self.state.thetas[k].copy_from(&self.buf_theta);
        Ok(())
    }

    /// σ² | · ~ Ig(n/2, ‖r‖²/2) (plus the proper-prior shift if configured).
    pub fn sample_sigma2(&mut self) -> Result<()> {
        let rss = self.state.residual.norm_squared();
        if rss == 0.0 {
            return Err(Error::State(
                "residual is exactly zero; the σ² conditional is degenerate".into(),
            ));
        }
        let (shape, scale) = sigma2_conditional(self.regressors.n(), rss, &self.sigma2_prior);
        self.state.sigma2 = self.draw_inverse_gamma(shape, scale);
        Ok(())
    }

    /// λₖ² | · ~ Ig((m+1)/2, 1/νₖ + ‖θₖ‖²_K/(2τ²)).
    pub fn sample_lambda2(&mut self, k: usize) -> Result<()> {
        let norm = self.kernel.quadratic_norm(&self.state.thetas[k])?;
        self.sample_lambda2_with_norm(k, norm)
    }

    fn sample_lambda2_with_norm(&mut self, k: usize, kernel_norm: f64) -> Result<()> {
        let (shape, scale) = lambda2_conditional(
            self.regressors.m(),
            self.state.nu[k],
            self.state.tau2,
            kernel_norm,
        );
        self.state.lambda2[k] = self.draw_inverse_gamma(shape, scale);
        Ok(())
    }

    /// τ² | · ~ Ig((mp+1)/2, 1/ξ + Σₖ ‖θₖ‖²_K/(2λₖ²)).
    pub fn sample_tau2(&mut self) -> Result<()> {
        let mut sum = 0.0;
        for k in 0..self.regressors.p() {
            let norm = self.kernel.quadratic_norm(&self.state.thetas[k])?;
            sum += norm / self.state.lambda2[k];
        }
        self.sample_tau2_with_sum(sum)
    }

    fn sample_tau2_with_sum(&mut self, sum_norm_over_lambda2: f64) -> Result<()> {
        let (shape, scale) = tau2_conditional(
            self.regressors.m(),
            self.regressors.p(),
            self.state.xi,
            sum_norm_over_lambda2,
        );
        self.state.tau2 = self.draw_inverse_gamma(shape, scale);
        Ok(())
    }

    /// νₖ | · ~ Ig(1, 1 + 1/λₖ²) for all k, then ξ | · ~ Ig(1, 1 + 1/τ²).
    pub fn sample_aux(&mut self) -> Result<()> {
        for k in 0..self.regressors.p() {
            let (shape, scale) = nu_conditional(self.state.lambda2[k]);
            self.state.nu[k] = self.draw_inverse_gamma(shape, scale);
        }
        let (shape, scale) = xi_conditional(self.state.tau2);
        self.state.xi = self.draw_inverse_gamma(shape, scale);
        Ok(())
    }

    /// One systematic-scan sweep: θ₁..θ_p, σ², λ₁²..λ_p², τ², ν₁..ν_p, ξ.
    pub fn sweep(&mut self) -> Result<()> {
        let p = self.regressors.p();
        for k in 0..p {
            self.sample_theta(k)?;
        }
        self.sample_sigma2()?;
        // ‖θₖ‖²_K feeds both the λₖ² and τ² conditionals and θ does not
        // change in between, so compute each norm once.
        let mut norms = Vec::with_capacity(p);
        for k in 0..p {
            norms.push(self.kernel.quadratic_norm(&self.state.thetas[k])?);
        }
        for k in 0..p {
            self.sample_lambda2_with_norm(k, norms[k])?;
        }
        let sum = norms
            .iter()
            .zip(&self.state.lambda2)
            .map(|(n, l)| n / l)
            .sum();
        self.sample_tau2_with_sum(sum)?;
        self.sample_aux()
    }
}

// ---------------------------------------------------------------------------
// Chain orchestration
// ---------------------------------------------------------------------------

/// Thinned record of one chain plus running posterior means and counters.
#[derive(Debug, Clone)]
pub struct ChainRecord {
    pub config: ChainConfig,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub burn_in_sweeps: usize,
    /// 0-based sweep index of every stored state.
    pub stored_sweeps: Vec<usize>,
    pub sigma2: Vec<f64>,
    pub tau2: Vec<f64>,
    /// One λ² vector (length p) per stored state.
    pub lambda2: Vec<Vec<f64>>,
    /// Posterior mean of every module over all post-burn-in sweeps.
    pub theta_mean: Vec<DVector<f64>>,
    /// Sweep indices of the retained θ samples.
    pub theta_sample_sweeps: Vec<usize>,
    /// Retained θ samples (one Vec of p modules per retained sweep).
    pub theta_samples: Vec<Vec<DVector<f64>>>,
    pub evidence: Option<EvidenceTrace>,
    pub floor_events: u64,
    pub wall_seconds: f64,
    pub sweeps_per_second: f64,
}

/// Runs one chain: precomputes every module factor, sweeps `config.n_iters`
/// times in fixed scan order, and stores every `thin`-th post-burn-in state.
/// With `evidence_stride` set, the optimized marginal likelihood is
/// evaluated at that stride over the post-burn-in sweeps.
pub fn run_chain(
    dataset: &NetworkDataset,
    regressors: &RegressorSet,
    kernel: &StableSplineKernel,
    config: &ChainConfig,
) -> Result<ChainRecord> {
    config.validate()?;
    if regressors.n() != dataset.n()
        || regressors.m() != dataset.m()
        || regressors.p() != dataset.p()
    {
        return Err(Error::Shape(format!(
            "regressors are ({}, {}, {}), dataset is ({}, {}, {})",
            regressors.n(),
            regressors.m(),
            regressors.p(),
            dataset.n(),
            dataset.m(),
            dataset.p()
        )));
    }

    let started = Instant::now();
    let precomp = precompute_all(regressors, kernel)?;
    let mut sampler = GibbsSampler::new(
        regressors,
        kernel,
        &precomp,
        dataset.outputs.clone(),
        config.theta_init_value,
        config.variance_init,
        config.sigma2_prior,
        RngStream::new(config.seed),
    )?;

    let evaluator = match config.evidence_stride {
        Some(_) => Some(EvidenceEvaluator::new(regressors, kernel)?),
        None => None,
    };

    let (n, m, p) = (dataset.n(), dataset.m(), dataset.p());
    let burn = config.burn_in_sweeps();
    let post_burn = config.n_iters - burn;
    let thinned = post_burn.div_ceil(config.thin);
    let theta_stride = if config.max_theta_samples == 0 {
        None
    } else {
        Some(config.thin * thinned.div_ceil(config.max_theta_samples))
    };

    let mut record = ChainRecord {
        config: config.clone(),
        n,
        m,
        p,
        burn_in_sweeps: burn,
        stored_sweeps: Vec::with_capacity(thinned),
        sigma2: Vec::with_capacity(thinned),
        tau2: Vec::with_capacity(thinned),
        lambda2: Vec::with_capacity(thinned),
        theta_mean: vec![DVector::zeros(m); p],
        theta_sample_sweeps: Vec::new(),
        theta_samples: Vec::new(),
        evidence: None,
        floor_events: 0,
        wall_seconds: 0.0,
        sweeps_per_second: 0.0,
    };
    let mut evidence_trace: Option<EvidenceTrace> = None;

    for sweep in 0..config.n_iters {
        sampler
            .sweep()
            .map_err(|e| Error::Numerical(format!("sweep {sweep}: {e}")))?;
        if (sweep + 1) % config.residual_refresh_every == 0 {
            sampler.refresh_residual()?;
        }
        if sweep < burn {
            continue;
        }
        let offset = sweep - burn;
        let state = sampler.state();
        for k in 0..p {
            record.theta_mean[k] += &state.thetas[k];
        }
        if offset % config.thin == 0 {
            record.stored_sweeps.push(sweep);
            record.sigma2.push(state.sigma2);
            record.tau2.push(state.tau2);
            record.lambda2.push(state.lambda2.clone());
        }
        if let Some(stride) = theta_stride {
            if offset % stride == 0 && record.theta_samples.len() < config.max_theta_samples {
                record.theta_sample_sweeps.push(sweep);
                record.theta_samples.push(state.thetas.clone());
            }
        }
        if let (Some(stride), Some(eval)) = (config.evidence_stride, evaluator.as_ref()) {
            if offset % stride == 0 {
                let value = eval
                    .log_marginal(&sampler.y, state.sigma2, &state.lambda2, state.tau2)
                    .map_err(|e| Error::Numerical(format!("evidence at sweep {sweep}: {e}")))?;
                let trace = evidence_trace.get_or_insert_with(EvidenceTrace::new);
                trace.push(sweep, value, state.sigma2, &state.lambda2, state.tau2);
            }
        }
    }

    for mean in record.theta_mean.iter_mut() {
        *mean /= post_burn as f64;
    }
    record.evidence = evidence_trace;
    record.floor_events = sampler.floor_events();
    record.wall_seconds = started.elapsed().as_secs_f64();
    record.sweeps_per_second = config.n_iters as f64 / record.wall_seconds.max(1e-9);
    Ok(record)
}

// ---------------------------------------------------------------------------
// Posterior summaries
// ---------------------------------------------------------------------------

/// Per-module posterior means, pointwise credible bands, estimated norms and
/// fits against truth.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub means: Vec<DVector<f64>>,
    pub norms: Vec<f64>,
    pub band_lower: Option<Vec<DVector<f64>>>,
    pub band_upper: Option<Vec<DVector<f64>>>,
    /// Fit percent per module with nonzero truth (0-based indices), when
    /// truth was given.
    pub fits: Option<BTreeMap<usize, f64>>,
}

/// `100·(1 − ‖θ − θ̂‖/‖θ‖)`.
pub fn fit_percent(truth: &DVector<f64>, estimate: &DVector<f64>) -> f64 {
    100.0 * (1.0 - (truth - estimate).norm() / truth.norm())
}

/// Linear-interpolation sample quantile of a sorted slice.
pub(crate) fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Posterior means, pointwise central 95% credible bands (when θ samples
/// were retained), estimated norms, and fits for the modules with nonzero
/// truth.
pub fn summarize_posterior(
    record: &ChainRecord,
    truth: Option<&[DVector<f64>]>,
) -> Result<PosteriorSummary> {
    if record.stored_sweeps.is_empty() {
        return Err(Error::State(
            "chain record holds no post-burn-in samples".into(),
        ));
    }
    let means = record.theta_mean.clone();
    let norms: Vec<f64> = means.iter().map(|t| t.norm()).collect();

    let (band_lower, band_upper) = if record.theta_samples.len() >= 2 {
        let mut lower = Vec::with_capacity(record.p);
        let mut upper = Vec::with_capacity(record.p);
        let mut column: Vec<f64> = Vec::with_capacity(record.theta_samples.len());
        for k in 0..record.p {
            let mut lo = DVector::zeros(record.m);
            let mut hi = DVector::zeros(record.m);
            for i in 0..record.m {
                column.clear();
                column.extend(record.theta_samples.iter().map(|s| s[k][i]));
                column.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
                lo[i] = sorted_quantile(&column, 0.025);
                hi[i] = sorted_quantile(&column, 0.975);
            }
            lower.push(lo);
            upper.push(hi);
        }
        (Some(lower), Some(upper))
    } else {
        (None, None)
    };

    let fits = match truth {
        Some(ts) => {
            if ts.len() != record.p {
                return Err(Error::Shape(format!(
                    "truth has {} modules, record has {}",
                    ts.len(),
                    record.p
                )));
            }
            let mut map = BTreeMap::new();
            for (k, t) in ts.iter().enumerate() {
                if t.norm() > 0.0 {
                    map.insert(k, fit_percent(t, &means[k]));
                }
            }
            Some(map)
        }
        None => None,
    };

    Ok(PosteriorSummary {
        means,
        norms,
        band_lower,
        band_upper,
        fits,
    })
}

/// Effective sample size through Geyer's initial-positive-sequence rule.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let gamma = |lag: usize| -> f64 {
        (0..n - lag)
            .map(|i| (xs[i] - mean) * (xs[i + lag] - mean))
            .sum::<f64>()
            / nf
    };
    let g0 = gamma(0);
    if g0 <= 0.0 {
        return nf;
    }
    let mut sum_pairs = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = gamma(lag) + gamma(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        lag += 2;
    }
    (nf / (1.0 + 2.0 * sum_pairs / g0)).min(nf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{synthesize_dataset, InputKind};
    use approx::assert_relative_eq;

    fn tiny_problem(
        seed: u64,
        n: usize,
        m: usize,
        p: usize,
        alpha: f64,
    ) -> (RegressorSet, StableSplineKernel, DVector<f64>) {
        let mut rng = RngStream::new(seed);
        let inputs: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n + m - 1).map(|_| rng.standard_normal()).collect())
            .collect();
        let regressors = RegressorSet::from_inputs(&inputs, n, m).unwrap();
        let kernel = StableSplineKernel::build(m, alpha).unwrap();
        let y = DVector::from_fn(n, |_, _| rng.standard_normal());
        (regressors, kernel, y)
    }

    #[test]
    fn precompute_zero_regressor() {
        let kernel = StableSplineKernel::build(4, 0.8).unwrap();
        let g = DMatrix::<f64>::zeros(6, 4);
        let pc = precompute_module(&g, &kernel, 0).unwrap();
        assert!(pc.eigenvalues().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn precompute_scalar_case() {
        let kernel = StableSplineKernel::build(1, 0.5).unwrap();
        let g = DMatrix::from_vec(1, 1, vec![3.0]);
        let pc = precompute_module(&g, &kernel, 0).unwrap();
        assert_relative_eq!(pc.eigenvalues()[0], 9.0, epsilon = 1e-12);
        assert_relative_eq!(pc.eigenvectors()[(0, 0)].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn precompute_reconstructs_whitened_gram() {
        let (regressors, kernel, _) = tiny_problem(1, 20, 5, 1, 0.8);
        let pc = precompute_module(regressors.module(0), &kernel, 0).unwrap();
        let gm = regressors.module(0) * kernel.factor();
        let direct = gm.transpose() * &gm;
        let rebuilt = pc.eigenvectors()
            * DMatrix::from_diagonal(pc.eigenvalues())
            * pc.eigenvectors().transpose();
        let max_d = pc.eigenvalues().max();
        for i in 0..5 {
            for j in 0..5 {
                assert!(
                    (direct[(i, j)] - rebuilt[(i, j)]).abs() <= 1e-10 * (1.0 + max_d),
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn conditional_parameters_read_off_formulas() {
        // σ²: r = (1,1), n = 2 → Ig(1, 1)
        let (a, b) = sigma2_conditional(2, 2.0, &Sigma2Prior::Jeffreys);
        assert_eq!((a, b), (1.0, 1.0));

        // λ²: m = 3, ν = 1, ‖θ‖²_K = 2, τ² = 1 → Ig(2, 2)
        let (a, b) = lambda2_conditional(3, 1.0, 1.0, 2.0);
        assert_eq!((a, b), (2.0, 2.0));

        // zero-norm case: θ = 0 → Ig((m+1)/2, 1/ν)
        let (a, b) = lambda2_conditional(3, 4.0, 1.0, 0.0);
        assert_eq!((a, b), (2.0, 0.25));

        // τ²: m = 2, p = 3, ξ = 1, Σ ‖θₖ‖²_K/λₖ² = 8 → Ig(3.5, 5)
        let (a, b) = tau2_conditional(2, 3, 1.0, 8.0);
        assert_eq!((a, b), (3.5, 5.0));

        // all θ = 0 → Ig((mp+1)/2, 1/ξ)
        let (a, b) = tau2_conditional(2, 3, 2.0, 0.0);
        assert_eq!((a, b), (3.5, 0.5));

        // ν: λ² = 1 → Ig(1, 2)
        assert_eq!(nu_conditional(1.0), (1.0, 2.0));

        // ξ: τ² → ∞ → Ig(1, 1)
        let (a, b) = xi_conditional(f64::INFINITY);
        assert_eq!((a, b), (1.0, 1.0));
    }

    #[test]
    fn doubling_lambda2_halves_tau2_scale_term() {
        let norms = [1.3, 0.4, 2.2];
        let lam = [0.5, 1.5, 3.0];
        let sum: f64 = norms.iter().zip(&lam).map(|(n, l)| n / l).sum();
        let sum_doubled: f64 = norms.iter().zip(&lam).map(|(n, l)| n / (2.0 * l)).sum();
        let (_, b1) = tau2_conditional(4, 3, 1.0, sum);
        let (_, b2) = tau2_conditional(4, 3, 1.0, sum_doubled);
        assert_relative_eq!(b1 - 1.0, 2.0 * (b2 - 1.0), epsilon = 1e-12);
    }

    #[test]
    fn theta_degenerates_under_shrinkage_underflow() {
        let (regressors, kernel, y) = tiny_problem(2, 10, 3, 2, 0.8);
        let precomp = precompute_all(&regressors, &kernel).unwrap();
        let mut sampler = GibbsSampler::new(
            &regressors,
            &kernel,
            &precomp,
            y,
            1e-4,
            1.0,
            Sigma2Prior::Jeffreys,
            RngStream::new(3),
        )
        .unwrap();
        sampler
            .set_scales(vec![1e-305, 1.0], vec![1.0, 1.0], 1e-3, 1.0, 1.0)
            .unwrap();
        sampler.sample_theta(0).unwrap();
        assert!(sampler.state().thetas[0].iter().all(|&x| x == 0.0));
        // Residual must remain consistent after the degenerate draw.
        let y = sampler.outputs().clone();
        let fresh = Residual::compute(&y, &regressors, &sampler.state().thetas).unwrap();
        assert!((sampler.state().residual.vector() - fresh.vector()).amax() < 1e-10);
    }

    #[test]
    fn tiny_shrinkage_pins_scalar_module_near_zero() {
        // Scalar probe with τ²λ² → 1e-12 and y = 1: the conditional mean
        // collapses to ~1e-12.
        let regressors =
            RegressorSet::from_matrices(vec![DMatrix::from_vec(1, 1, vec![1.0])]).unwrap();
        let kernel = StableSplineKernel::build(1, 0.5).unwrap();
        let precomp = precompute_all(&regressors, &kernel).unwrap();
        let y = DVector::from_vec(vec![1.0]);
        let mut draws = Vec::new();
        for seed in 0..200 {
            let mut sampler = GibbsSampler::new(
                &regressors,
                &kernel,
                &precomp,
                y.clone(),
                0.0,
                1.0,
                Sigma2Prior::Jeffreys,
                RngStream::new(seed),
            )
            .unwrap();
            sampler
                .set_scales(vec![1e-12], vec![1.0], 1.0, 1.0, 1.0)
                .unwrap();
            sampler.sample_theta(0).unwrap();
            draws.push(sampler.state().thetas[0][0]);
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 1e-5, "shrunk mean {mean}");
        assert!(draws.iter().all(|d| d.abs() < 1e-4));
    }

    #[test]
    fn sigma2_degenerate_residual_errors() {
        let (regressors, kernel, _) = tiny_problem(4, 8, 3, 1, 0.8);
        let precomp = precompute_all(&regressors, &kernel).unwrap();
        // Zero outputs with zero thetas give a zero residual.
        let mut sampler = GibbsSampler::new(
            &regressors,
            &kernel,
            &precomp,
            DVector::zeros(8),
            0.0,
            1.0,
            Sigma2Prior::Jeffreys,
            RngStream::new(4),
        )
        .unwrap();
        assert!(matches!(sampler.sample_sigma2(), Err(Error::State(_))));
    }

    #[test]
    fn run_chain_is_reproducible() {
        let dataset =
            synthesize_dataset(3, 1, 60, 20, 10.0, InputKind::White, RngStream::new(5)).unwrap();
        let regressors = dataset.regressors().unwrap();
        let kernel = StableSplineKernel::build(20, 0.8).unwrap();
        let mut config = ChainConfig::new(200, 17);
        config.thin = 5;
        let a = run_chain(&dataset, &regressors, &kernel, &config).unwrap();
        let b = run_chain(&dataset, &regressors, &kernel, &config).unwrap();
        assert_eq!(a.sigma2, b.sigma2);
        assert_eq!(a.tau2, b.tau2);
        assert_eq!(a.lambda2, b.lambda2);
        assert_eq!(a.stored_sweeps, b.stored_sweeps);
        for (x, y) in a.theta_mean.iter().zip(&b.theta_mean) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }

    #[test]
    fn chain_keeps_residual_consistent_and_scales_positive() {
        let dataset =
            synthesize_dataset(4, 2, 50, 20, 10.0, InputKind::White, RngStream::new(6)).unwrap();
        let regressors = dataset.regressors().unwrap();
        let kernel = StableSplineKernel::build(20, 0.85).unwrap();
        let precomp = precompute_all(&regressors, &kernel).unwrap();
        let mut sampler = GibbsSampler::new(
            &regressors,
            &kernel,
            &precomp,
            dataset.outputs.clone(),
            1e-4,
            1.0,
            Sigma2Prior::Jeffreys,
            RngStream::new(7),
        )
        .unwrap();
        for _ in 0..300 {
            sampler.sweep().unwrap();
            let st = sampler.state();
            assert!(st.sigma2 > 0.0 && st.tau2 > 0.0 && st.xi > 0.0);
            assert!(st.lambda2.iter().all(|&v| v > 0.0));
            assert!(st.nu.iter().all(|&v| v > 0.0));
        }
        let fresh =
            Residual::compute(&dataset.outputs, &regressors, &sampler.state().thetas).unwrap();
        let drift = (sampler.state().residual.vector() - fresh.vector()).amax();
        assert!(
            drift < 1e-8 * (1.0 + dataset.outputs.amax()),
            "residual drift {drift}"
        );
    }

    #[test]
    fn summarize_fit_edge_cases() {
        let t = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        assert_relative_eq!(fit_percent(&t, &t), 100.0, epsilon = 1e-12);
        assert_relative_eq!(fit_percent(&t, &DVector::zeros(3)), 0.0, epsilon = 1e-12);
        assert_relative_eq!(fit_percent(&t, &(2.0 * &t)), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn summarize_rejects_empty_record() {
        let dataset =
            synthesize_dataset(2, 1, 40, 20, 10.0, InputKind::White, RngStream::new(8)).unwrap();
        let regressors = dataset.regressors().unwrap();
        let kernel = StableSplineKernel::build(20, 0.8).unwrap();
        let config = ChainConfig::new(50, 9);
        let mut record = run_chain(&dataset, &regressors, &kernel, &config).unwrap();
        record.stored_sweeps.clear();
        assert!(matches!(
            summarize_posterior(&record, None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn ess_detects_autocorrelation() {
        let mut rng = RngStream::new(10);
        let iid: Vec<f64> = (0..4000).map(|_| rng.standard_normal()).collect();
        let ess_iid = effective_sample_size(&iid);
        assert!(ess_iid > 2500.0, "iid ESS {ess_iid}");

        let mut x = 0.0;
        let ar: Vec<f64> = (0..4000)
            .map(|_| {
                x = 0.95 * x + rng.standard_normal();
                x
            })
            .collect();
        let ess_ar = effective_sample_size(&ar);
        assert!(ess_ar < 600.0, "AR ESS {ess_ar}");
    }

    #[test]
    fn quantile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(sorted_quantile(&xs, 0.0), 1.0);
        assert_relative_eq!(sorted_quantile(&xs, 1.0), 4.0);
        assert_relative_eq!(sorted_quantile(&xs, 0.5), 2.5);
    }
}

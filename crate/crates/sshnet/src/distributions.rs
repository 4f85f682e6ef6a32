//! Seeded sampling for every distribution in the hierarchy: inverse-gamma,
//! half-Cauchy (direct and through its inverse-gamma mixture), factored
//! multivariate Gaussians, and the prior shrinkage-coefficient profiles.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Counter-based generator with explicit stream support.
///
/// Equal seeds reproduce the exact draw sequence on every platform; parallel
/// consumers (chains, Monte Carlo runs) take distinct stream indices derived
/// from one root seed. Single-owner: never share a stream across threads.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Stream `index` of the family rooted at `seed`; streams with distinct
    /// indices are independent by construction.
    pub fn substream(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self {
            seed,
            stream: index,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    /// One standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Shape/scale pair of an inverse-gamma distribution with density
/// `b^a/Γ(a) · x^(-a-1) · exp(-b/x)` on x > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGammaParams {
    shape: f64,
    scale: f64,
}

impl InverseGammaParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0) {
            return Err(Error::Parameter(format!(
                "inverse-gamma shape must be positive, got {shape}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Parameter(format!(
                "inverse-gamma scale must be positive, got {scale}"
            )));
        }
        Ok(Self { shape, scale })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// One inverse-gamma draw, as the reciprocal of a gamma(shape, rate = scale)
/// draw.
pub fn sample_inverse_gamma(params: InverseGammaParams, rng: &mut RngStream) -> f64 {
    let gamma = Gamma::new(params.shape, 1.0 / params.scale)
        .expect("parameters validated at construction");
    loop {
        let g: f64 = gamma.sample(rng.inner());
        // Underflowed gamma draws would map to +inf; retry instead.
        if g > 0.0 && g.is_finite() {
            return 1.0 / g;
        }
    }
}

/// Draw from the standard half-Cauchy C+(0,1) by inverse CDF,
/// `x = tan(π·u/2)`.
pub fn sample_half_cauchy(rng: &mut RngStream) -> f64 {
    loop {
        let u = rng.uniform();
        let x = (std::f64::consts::FRAC_PI_2 * u).tan();
        if x > 0.0 {
            return x;
        }
    }
}

/// Draw `ν ~ Ig(1/2, 1)` then `λ² | ν ~ Ig(1/2, 1/ν)`; the marginal of
/// `sqrt(λ²)` is C+(0,1). Returns `(λ², ν)`.
pub fn sample_half_cauchy_via_mixture(rng: &mut RngStream) -> (f64, f64) {
    let nu = sample_inverse_gamma(
        InverseGammaParams::new(0.5, 1.0).expect("static parameters"),
        rng,
    );
    let lambda2 = sample_inverse_gamma(
        InverseGammaParams::new(0.5, 1.0 / nu).expect("1/nu is positive and finite"),
        rng,
    );
    (lambda2, nu)
}

/// `mean + A·ω` with ω i.i.d. standard normal, i.e. one draw from
/// N(mean, A·Aᵀ).
pub fn sample_gaussian_factored(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    if factor.nrows() != mean.len() {
        return Err(Error::Shape(format!(
            "factored Gaussian: factor has {} rows, mean has length {}",
            factor.nrows(),
            mean.len()
        )));
    }
    let omega = DVector::from_fn(factor.ncols(), |_, _| rng.standard_normal());
    let mut out = mean.clone();
    out.gemv(1.0, factor, &omega, 1.0);
    Ok(out)
}

/// The stochastic shrinkage coefficient `c_i = α^{i-1}λ²/(1 + α^{i-1}λ²)`
/// for 1-based coefficient index `i`.
pub fn shrinkage_coefficient(i: usize, alpha: f64, lambda2: f64) -> f64 {
    let w = alpha.powi(i as i32 - 1) * lambda2;
    w / (1.0 + w)
}

/// Histogram of a shrinkage coefficient over (0, 1], right-closed bins.
#[derive(Debug, Clone)]
pub struct ShrinkageHistogram {
    /// 1-based coefficient index i.
    pub coefficient_index: usize,
    pub alpha: f64,
    pub bin_width: f64,
    /// Probability of `c_i ∈ (x - Δ, x]` for x = Δ, 2Δ, ..., 1.
    pub probabilities: Vec<f64>,
}

impl ShrinkageHistogram {
    /// Upper edge of each bin.
    pub fn bin_upper_edges(&self) -> impl Iterator<Item = f64> + '_ {
        let w = self.bin_width;
        (1..=self.probabilities.len()).map(move |b| b as f64 * w)
    }
}

/// Samples λ ~ C+(0,1) `n_samples` times, computes `c_i`, and bins the values
/// into right-closed bins of width `bin_width` over (0, 1].
pub fn shrinkage_profile(
    i: usize,
    alpha: f64,
    n_samples: usize,
    bin_width: f64,
    rng: &mut RngStream,
) -> Result<ShrinkageHistogram> {
    if i == 0 {
        return Err(Error::Parameter(
            "shrinkage coefficient index is 1-based".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!(
            "shrinkage profile needs alpha in (0,1), got {alpha}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let n_bins_f = 1.0 / bin_width;
    let n_bins = n_bins_f.round();
    if !(bin_width > 0.0 && bin_width <= 1.0) || (n_bins_f - n_bins).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "bin width {bin_width} does not divide the unit interval evenly"
        )));
    }
    let n_bins = n_bins as usize;

    let mut counts = vec![0u64; n_bins];
    for _ in 0..n_samples {
        let lambda = sample_half_cauchy(rng);
        let c = shrinkage_coefficient(i, alpha, lambda * lambda);
        // Right-closed bins: c ∈ ((b-1)·Δ, b·Δ] lands in slot b-1.
        let bin = (c / bin_width).ceil() as usize;
        let bin = bin.clamp(1, n_bins) - 1;
        counts[bin] += 1;
    }
    let probabilities = counts
        .into_iter()
        .map(|c| c as f64 / n_samples as f64)
        .collect();
    Ok(ShrinkageHistogram {
        coefficient_index: i,
        alpha,
        bin_width,
        probabilities,
    })
}

//! Synthetic network benchmark generator: random order-10 rational modules
//! truncated to FIRs, white or low-pass inputs, and noisy outputs at a
//! prescribed signal-to-noise ratio.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::regressors::RegressorSet;

/// Transfer-function order of the generated modules.
pub const MODULE_ORDER: usize = 10;
/// Largest admissible pole/zero magnitude.
pub const ROOT_RADIUS: f64 = 0.95;
/// Smallest FIR length for which truncation of an order-10 response with
/// poles inside the 0.95 disk is considered meaningful.
pub const MIN_FIR_LENGTH: usize = 20;
/// Range of the target Euclidean norm of the truncated responses.
pub const NORM_RANGE: (f64, f64) = (0.2, 1.0);

/// Input signal family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// i.i.d. unit-variance Gaussian noise.
    White,
    /// White noise filtered by 1/(z − 0.9).
    Lowpass,
}

impl std::str::FromStr for InputKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(InputKind::White),
            "lowpass" => Ok(InputKind::Lowpass),
            other => Err(Error::Parameter(format!(
                "unknown input kind `{other}` (expected `white` or `lowpass`)"
            ))),
        }
    }
}

impl std::fmt::Display for InputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputKind::White => write!(f, "white"),
            InputKind::Lowpass => write!(f, "lowpass"),
        }
    }
}

/// Pole/zero structure of one randomly drawn rational module.
#[derive(Debug, Clone)]
pub struct RandomModuleSpec {
    /// Ten poles inside the 0.95 disk, complex ones in conjugate pairs.
    pub poles: Vec<Complex64>,
    /// Nine zeros, same protocol as the poles.
    pub zeros: Vec<Complex64>,
    /// Scale applied to the raw truncated response; set when the response is
    /// materialized for a given FIR length.
    pub gain: f64,
    /// Euclidean norm of the truncated response after scaling.
    pub target_norm: f64,
}

/// Draws a root multiset of the given total order: each step adds one real
/// root (uniform on [-r, r]) or a conjugate pair (magnitude uniform on
/// [0, r], phase uniform on [0, π]) with equal probability. When a single
/// slot remains only a real root fits.
fn draw_roots(order: usize, radius: f64, rng: &mut RngStream) -> Vec<Complex64> {
    let mut roots = Vec::with_capacity(order);
    while roots.len() < order {
        let slots_left = order - roots.len();
        if slots_left >= 2 && rng.uniform() >= 0.5 {
            let mag = radius * rng.uniform();
            let phase = std::f64::consts::PI * rng.uniform();
            let root = Complex64::from_polar(mag, phase);
            roots.push(root);
            roots.push(root.conj());
        } else {
            let real = radius * (2.0 * rng.uniform() - 1.0);
            roots.push(Complex64::new(real, 0.0));
        }
    }
    roots
}

/// Expands a conjugate-closed root multiset into monic real polynomial
/// coefficients `[1, c1, ..., cd]` (descending powers).
fn real_polynomial_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for root in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * root;
        }
        coeffs = next;
    }
    coeffs.iter().map(|c| c.re).collect()
}

/// First `m` impulse-response samples of `N(z)/D(z)` with monic numerator of
/// order `d-1` and monic denominator of order `d`, by linear recursion.
/// With all poles at zero this reduces to the numerator coefficient sequence.
pub fn impulse_response_from_roots(
    poles: &[Complex64],
    zeros: &[Complex64],
    m: usize,
) -> DVector<f64> {
    let den = real_polynomial_from_roots(poles);
    let num = real_polynomial_from_roots(zeros);
    let mut h = DVector::zeros(m);
    for j in 0..m {
        let mut v = if j < num.len() { num[j] } else { 0.0 };
        for i in 1..den.len().min(j + 1) {
            v -= den[i] * h[j - i];
        }
        h[j] = v;
    }
    h
}

impl RandomModuleSpec {
    /// Draws the pole/zero structure and target norm. Draw order: poles,
    /// zeros, target norm.
    pub fn draw(rng: &mut RngStream) -> Self {
        let poles = draw_roots(MODULE_ORDER, ROOT_RADIUS, rng);
        let zeros = draw_roots(MODULE_ORDER - 1, ROOT_RADIUS, rng);
        let target_norm = NORM_RANGE.0 + (NORM_RANGE.1 - NORM_RANGE.0) * rng.uniform();
        Self {
            poles,
            zeros,
            gain: 1.0,
            target_norm,
        }
    }

    /// Truncated impulse response of length `m`, rescaled so its Euclidean
    /// norm equals the target norm; records the applied gain.
    pub fn impulse_response(&mut self, m: usize) -> DVector<f64> {
        let mut h = impulse_response_from_roots(&self.poles, &self.zeros, m);
        let norm = h.norm();
        self.gain = self.target_norm / norm;
        h *= self.gain;
        h
    }
}

/// Draws one random module and returns its normalized length-`m` FIR.
pub fn random_impulse_response(m: usize, rng: &mut RngStream) -> Result<DVector<f64>> {
    let (theta, _) = random_module(m, rng)?;
    Ok(theta)
}

/// Like [`random_impulse_response`], also returning the drawn structure.
pub fn random_module(m: usize, rng: &mut RngStream) -> Result<(DVector<f64>, RandomModuleSpec)> {
    if m < MIN_FIR_LENGTH {
        return Err(Error::Parameter(format!(
            "FIR length {m} too short to capture an order-{MODULE_ORDER} response; need at least {MIN_FIR_LENGTH}"
        )));
    }
    let mut spec = RandomModuleSpec::draw(rng);
    let theta = spec.impulse_response(m);
    Ok((theta, spec))
}

/// Generates `n_raw` input samples of the requested kind.
pub fn generate_input(kind: InputKind, n_raw: usize, rng: &mut RngStream) -> Vec<f64> {
    match kind {
        InputKind::White => (0..n_raw).map(|_| rng.standard_normal()).collect(),
        InputKind::Lowpass => {
            // x(t) = 0.9 x(t-1) + w(t-1), started from x(0) = 0.
            let mut x = 0.0;
            (0..n_raw)
                .map(|_| {
                    x = 0.9 * x + rng.standard_normal();
                    x
                })
                .collect()
        }
    }
}

/// Inputs, outputs and ground truth of one synthetic experiment.
#[derive(Debug, Clone)]
pub struct NetworkDataset {
    /// p raw input signals of length n + m − 1.
    pub inputs: Vec<Vec<f64>>,
    /// n retained noisy outputs.
    pub outputs: DVector<f64>,
    /// True FIR per module (exactly zero for inactive modules), when known.
    pub truth: Option<Vec<DVector<f64>>>,
    /// Noise variance used during synthesis, when known.
    pub sigma2_true: Option<f64>,
    /// 0-based indices of modules with nonzero truth, when known.
    pub active_set: Option<Vec<usize>>,
    n: usize,
    m: usize,
    p: usize,
    /// Seed of the stream that generated the data.
    pub seed: u64,
    pub input_kind: InputKind,
}

impl NetworkDataset {
    /// Wraps loaded data, validating dimensions.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        inputs: Vec<Vec<f64>>,
        outputs: DVector<f64>,
        truth: Option<Vec<DVector<f64>>>,
        sigma2_true: Option<f64>,
        active_set: Option<Vec<usize>>,
        n: usize,
        m: usize,
        p: usize,
        seed: u64,
        input_kind: InputKind,
    ) -> Result<Self> {
        if inputs.len() != p {
            return Err(Error::Shape(format!(
                "dataset declares p = {p} but has {} inputs",
                inputs.len()
            )));
        }
        if outputs.len() != n {
            return Err(Error::Shape(format!(
                "dataset declares n = {n} but has {} outputs",
                outputs.len()
            )));
        }
        let raw = n + m - 1;
        for (k, u) in inputs.iter().enumerate() {
            if u.len() != raw {
                return Err(Error::Shape(format!(
                    "input {k} has {} samples, expected n + m - 1 = {raw}",
                    u.len()
                )));
            }
        }
        if let Some(ts) = &truth {
            if ts.len() != p {
                return Err(Error::Shape(format!(
                    "truth has {} modules, expected {p}",
                    ts.len()
                )));
            }
            if let Some(bad) = ts.iter().position(|t| t.len() != m) {
                return Err(Error::Shape(format!(
                    "truth vector {bad} has length {}, expected {m}",
                    ts[bad].len()
                )));
            }
        }
        if let Some(act) = &active_set {
            if let Some(&bad) = act.iter().find(|&&k| k >= p) {
                return Err(Error::Shape(format!(
                    "active module index {bad} out of range for p = {p}"
                )));
            }
        }
        Ok(Self {
            inputs,
            outputs,
            truth,
            sigma2_true,
            active_set,
            n,
            m,
            p,
            seed,
            input_kind,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Builds the Toeplitz regressors for this dataset.
    pub fn regressors(&self) -> Result<RegressorSet> {
        RegressorSet::from_inputs(&self.inputs, self.n, self.m)
    }
}

/// Synthesizes a network dataset: q active modules at random indices, random
/// impulse responses, fresh inputs, and noise with variance `var(z)/snr`
/// where z is the noiseless output. With q = 0 the noise variance falls back
/// to 1 so the dataset stays well-posed.
///
/// Takes the stream by value: the dataset records the stream's seed, and
/// replaying a fresh stream with the same seed reproduces the data bit for
/// bit. Draw order: active indices, impulse responses, inputs, noise.
pub fn synthesize_dataset(
    p: usize,
    q: usize,
    n: usize,
    m: usize,
    snr: f64,
    kind: InputKind,
    mut rng: RngStream,
) -> Result<NetworkDataset> {
    if p == 0 || n == 0 {
        return Err(Error::Parameter(
            "module count and output count must be positive".into(),
        ));
    }
    if q > p {
        return Err(Error::Parameter(format!(
            "cannot place q = {q} active modules in a network of p = {p}"
        )));
    }
    if m < MIN_FIR_LENGTH {
        return Err(Error::Parameter(format!(
            "FIR length {m} too short; need at least {MIN_FIR_LENGTH}"
        )));
    }
    if !(snr.is_finite() && snr > 0.0) {
        return Err(Error::Parameter(format!(
            "signal-to-noise ratio must be positive, got {snr}"
        )));
    }
    let seed = rng.seed();

    // Active indices: partial Fisher-Yates over 0..p.
    let mut pool: Vec<usize> = (0..p).collect();
    for i in 0..q {
        let j = i + (rng.uniform() * (p - i) as f64) as usize;
        pool.swap(i, j.min(p - 1));
    }
    let mut active: Vec<usize> = pool[..q].to_vec();
    active.sort_unstable();

    let mut truth = vec![DVector::zeros(m); p];
    for &k in &active {
        truth[k] = random_impulse_response(m, &mut rng)?;
    }

    let raw = n + m - 1;
    let inputs: Vec<Vec<f64>> = (0..p).map(|_| generate_input(kind, raw, &mut rng)).collect();

    let regressors = RegressorSet::from_inputs(&inputs, n, m)?;
    let z = regressors.predict(&truth)?;

    let sigma2 = if q == 0 {
        1.0
    } else {
        let mean = z.sum() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        var / snr
    };
    let sd = sigma2.sqrt();
    let outputs = DVector::from_fn(n, |i, _| z[i] + sd * rng.standard_normal());

    NetworkDataset::from_parts(
        inputs,
        outputs,
        Some(truth),
        Some(sigma2),
        Some(active),
        n,
        m,
        p,
        seed,
        kind,
    )
}

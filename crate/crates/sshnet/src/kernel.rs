//! First-order stable spline kernel: construction, Cholesky factor and the
//! kernel-weighted quadratic norm used by every conditional update.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smallest admissible variance decay rate.
pub const ALPHA_MIN: f64 = 1e-6;
/// Largest admissible variance decay rate.
pub const ALPHA_MAX: f64 = 0.999;

/// Which side a factor multiplication is applied on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorSide {
    /// `M · X`
    Left,
    /// `X · Mᵀ`
    Right,
}

/// The m×m covariance K with entries `alpha^max(i-1, j-1)` (1-based), its
/// lower-triangular factor M with K = M·Mᵀ, and the cached inverse.
///
/// Immutable after construction; cheap to share across threads.
#[derive(Debug, Clone)]
pub struct StableSplineKernel {
    m: usize,
    alpha: f64,
    k: DMatrix<f64>,
    factor: DMatrix<f64>,
    k_inv: DMatrix<f64>,
}

impl StableSplineKernel {
    /// Builds the kernel, its Cholesky factor and inverse.
    ///
    /// `alpha` must lie in `[ALPHA_MIN, ALPHA_MAX]`: the nominal range is
    /// (0, 1) but values at the ends make K singular or numerically
    /// indefinite, so they are rejected up front.
    pub fn build(m: usize, alpha: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Parameter("FIR length m must be at least 1".into()));
        }
        if !alpha.is_finite() || alpha < ALPHA_MIN || alpha > ALPHA_MAX {
            return Err(Error::Parameter(format!(
                "kernel decay alpha = {alpha} outside admissible range [{ALPHA_MIN}, {ALPHA_MAX}]"
            )));
        }

        // Entry (i, j) is the max(i, j)-th sequential power of alpha.
        let mut powers = vec![1.0f64; m];
        for t in 1..m {
            powers[t] = powers[t - 1] * alpha;
        }
        let k = DMatrix::from_fn(m, m, |i, j| powers[i.max(j)]);
        let chol = nalgebra::Cholesky::new(k.clone()).ok_or_else(|| {
            Error::Numerical(format!(
                "stable spline kernel is numerically indefinite for alpha = {alpha}, m = {m}"
            ))
        })?;
        let factor = chol.l();

        // K^-1 = M^-T M^-1, column by column through two triangular solves,
        // then one Newton refinement step to push the residual K·K^-1 - I
        // down to machine level even when K is badly conditioned.
        let mut k_inv = DMatrix::<f64>::identity(m, m);
        let solved = factor
            .solve_lower_triangular(&k_inv)
            .ok_or_else(|| Error::Numerical("singular kernel factor".into()))?;
        k_inv = factor
            .transpose()
            .solve_upper_triangular(&solved)
            .ok_or_else(|| Error::Numerical("singular kernel factor".into()))?;
        let mut correction = DMatrix::<f64>::identity(m, m) * 2.0;
        correction.gemm(-1.0, &k, &k_inv, 1.0);
        k_inv = &k_inv * correction;

        Ok(Self {
            m,
            alpha,
            k,
            factor,
            k_inv,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The kernel matrix K.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Lower-triangular M with K = M·Mᵀ.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Cached K⁻¹.
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.k_inv
    }

    /// `‖v‖²_K = vᵀ K⁻¹ v`, evaluated as `‖M⁻¹v‖²` through a triangular
    /// solve against the factor. Nonnegative by construction.
    pub fn quadratic_norm(&self, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.m {
            return Err(Error::Shape(format!(
                "quadratic norm: vector length {} does not match kernel size {}",
                v.len(),
                self.m
            )));
        }
        let w = self
            .factor
            .solve_lower_triangular(v)
            .ok_or_else(|| Error::Numerical("singular kernel factor".into()))?;
        Ok(w.norm_squared())
    }

    /// `M · X` (left) or `X · Mᵀ` (right).
    pub fn factor_apply(&self, x: &DMatrix<f64>, side: FactorSide) -> Result<DMatrix<f64>> {
        match side {
            FactorSide::Left => {
                if x.nrows() != self.m {
                    return Err(Error::Shape(format!(
                        "factor apply left: X has {} rows, kernel size is {}",
                        x.nrows(),
                        self.m
                    )));
                }
                Ok(&self.factor * x)
            }
            FactorSide::Right => {
                if x.ncols() != self.m {
                    return Err(Error::Shape(format!(
                        "factor apply right: X has {} columns, kernel size is {}",
                        x.ncols(),
                        self.m
                    )));
                }
                Ok(x * self.factor.transpose())
            }
        }
    }
}

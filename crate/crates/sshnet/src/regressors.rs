//! Toeplitz regressor matrices built from input signals, network output
//! prediction, and the incrementally-maintained residual.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Builds the n×m Toeplitz regressor for one module.
///
/// Row i holds the m most recent input samples ending at the sample aligned
/// with output i; the first m−1 raw samples are consumed as warm-up so every
/// row is fully populated. With more history than needed, the first
/// `n + m - 1` samples are used.
pub fn build_toeplitz(u: &[f64], n: usize, m: usize) -> Result<DMatrix<f64>> {
    if n == 0 || m == 0 {
        return Err(Error::Parameter(
            "regressor dimensions must be positive".into(),
        ));
    }
    let needed = n + m - 1;
    if u.len() < needed {
        return Err(Error::InsufficientHistory {
            needed,
            got: u.len(),
        });
    }
    Ok(DMatrix::from_fn(n, m, |i, j| u[m - 1 + i - j]))
}

/// The p regressor matrices of a network, all n×m.
#[derive(Debug, Clone)]
pub struct RegressorSet {
    g: Vec<DMatrix<f64>>,
    n: usize,
    m: usize,
}

impl RegressorSet {
    /// One Toeplitz matrix per input signal.
    pub fn from_inputs(inputs: &[Vec<f64>], n: usize, m: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Parameter("need at least one input signal".into()));
        }
        let g = inputs
            .iter()
            .map(|u| build_toeplitz(u, n, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { g, n, m })
    }

    /// Wraps pre-built matrices; all must share n and m.
    pub fn from_matrices(g: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = g
            .first()
            .ok_or_else(|| Error::Parameter("need at least one regressor matrix".into()))?;
        let (n, m) = (first.nrows(), first.ncols());
        for (k, gk) in g.iter().enumerate() {
            if gk.nrows() != n || gk.ncols() != m {
                return Err(Error::Shape(format!(
                    "regressor {k} is {}x{}, expected {n}x{m}",
                    gk.nrows(),
                    gk.ncols()
                )));
            }
        }
        Ok(Self { g, n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.g.len()
    }

    pub fn module(&self, k: usize) -> &DMatrix<f64> {
        &self.g[k]
    }

    pub fn modules(&self) -> &[DMatrix<f64>] {
        &self.g
    }

    /// `Σ_k G_k θ_k`.
    pub fn predict(&self, thetas: &[DVector<f64>]) -> Result<DVector<f64>> {
        if thetas.len() != self.p() {
            return Err(Error::Shape(format!(
                "predict: got {} coefficient vectors for {} modules",
                thetas.len(),
                self.p()
            )));
        }
        let mut out = DVector::zeros(self.n);
        for (gk, theta) in self.g.iter().zip(thetas) {
            if theta.len() != self.m {
                return Err(Error::Shape(format!(
                    "predict: coefficient vector of length {}, expected {}",
                    theta.len(),
                    self.m
                )));
            }
            out.gemv(1.0, gk, theta, 1.0);
        }
        Ok(out)
    }
}

/// `r = Y − Σ_k G_k θ_k` for the current coefficients, maintained
/// incrementally through module swaps. Single owner per chain.
#[derive(Debug, Clone)]
pub struct Residual {
    r: DVector<f64>,
}

impl Residual {
    /// Full recomputation from scratch.
    pub fn compute(
        y: &DVector<f64>,
        regressors: &RegressorSet,
        thetas: &[DVector<f64>],
    ) -> Result<Self> {
        if y.len() != regressors.n() {
            return Err(Error::Shape(format!(
                "residual: output length {} does not match regressor rows {}",
                y.len(),
                regressors.n()
            )));
        }
        let r = y - regressors.predict(thetas)?;
        Ok(Self { r })
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn norm_squared(&self) -> f64 {
        self.r.norm_squared()
    }

    /// `r ← r + G_k (θ_old − θ_new)`, the O(n·m) update after module k's
    /// coefficients change.
    pub fn swap_module(
        &mut self,
        g_k: &DMatrix<f64>,
        theta_old: &DVector<f64>,
        theta_new: &DVector<f64>,
    ) -> Result<()> {
        if g_k.nrows() != self.r.len() {
            return Err(Error::Shape(format!(
                "residual swap: regressor has {} rows, residual length {}",
                g_k.nrows(),
                self.r.len()
            )));
        }
        if theta_old.len() != g_k.ncols() || theta_new.len() != g_k.ncols() {
            return Err(Error::Shape(format!(
                "residual swap: coefficient length {}/{} does not match regressor columns {}",
                theta_old.len(),
                theta_new.len(),
                g_k.ncols()
            )));
        }
        let delta = theta_old - theta_new;
        self.r.gemv(1.0, g_k, &delta, 1.0);
        Ok(())
    }

    /// Writes `r + G_k θ_k` into `out`: the residual with module k's
    /// contribution restored, i.e. `Y − Σ_{j≠k} G_j θ_j`.
    pub fn with_module_restored(
        &self,
        g_k: &DMatrix<f64>,
        theta_k: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        out.copy_from(&self.r);
        out.gemv(1.0, g_k, theta_k, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::RngStream;
    use proptest::prelude::*;

    fn random_vector(len: usize, rng: &mut RngStream) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.standard_normal())
    }

    #[test]
    fn toeplitz_hand_example() {
        let g = build_toeplitz(&[1.0, 2.0, 3.0, 4.0], 2, 3).unwrap();
        assert_eq!(g.row(0).iter().copied().collect::<Vec<_>>(), [3.0, 2.0, 1.0]);
        assert_eq!(g.row(1).iter().copied().collect::<Vec<_>>(), [4.0, 3.0, 2.0]);
    }

    #[test]
    fn toeplitz_unit_impulse_gives_identity() {
        // Impulse at the first retained instant (raw index m-1) with n = m.
        let m = 5;
        let mut u = vec![0.0; 2 * m - 1];
        u[m - 1] = 1.0;
        let g = build_toeplitz(&u, m, m).unwrap();
        for i in 0..m {
            for j in 0..m {
                assert_eq!(g[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn toeplitz_zero_input() {
        let g = build_toeplitz(&[0.0; 12], 4, 3).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn toeplitz_insufficient_history() {
        let err = build_toeplitz(&[1.0, 2.0, 3.0], 2, 3).unwrap_err();
        match err {
            Error::InsufficientHistory { needed, got } => {
                assert_eq!(needed, 4);
                assert_eq!(got, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn predict_edge_cases() {
        let id = DMatrix::<f64>::identity(3, 3);
        let set = RegressorSet::from_matrices(vec![id.clone()]).unwrap();
        let zero = DVector::zeros(3);
        assert_eq!(set.predict(&[zero.clone()]).unwrap(), zero);

        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(set.predict(&[v.clone()]).unwrap(), v);

        let set2 = RegressorSet::from_matrices(vec![id.clone(), id]).unwrap();
        let out = set2.predict(&[v.clone(), -v.clone()]).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn swap_with_identical_thetas_is_noop() {
        let mut rng = RngStream::new(11);
        let u: Vec<f64> = (0..20).map(|_| rng.standard_normal()).collect();
        let g = build_toeplitz(&u, 10, 4).unwrap();
        let set = RegressorSet::from_matrices(vec![g.clone()]).unwrap();
        let theta = random_vector(4, &mut rng);
        let y = random_vector(10, &mut rng);
        let mut res = Residual::compute(&y, &set, &[theta.clone()]).unwrap();
        let before = res.vector().clone();
        res.swap_module(&g, &theta, &theta).unwrap();
        assert_eq!(res.vector(), &before);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn toeplitz_structure_is_exact(seed in 0u64..5000, n in 2usize..30, m in 2usize..10) {
            let mut rng = RngStream::new(seed);
            let u: Vec<f64> = (0..n + m - 1).map(|_| rng.standard_normal()).collect();
            let g = build_toeplitz(&u, n, m).unwrap();
            for i in 1..n {
                for j in 1..m {
                    prop_assert_eq!(g[(i, j)], g[(i - 1, j - 1)]);
                }
            }
        }

        #[test]
        fn predict_is_linear(seed in 0u64..5000) {
            let mut rng = RngStream::new(seed);
            let n = 8;
            let m = 3;
            let inputs: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..n + m - 1).map(|_| rng.standard_normal()).collect())
                .collect();
            let set = RegressorSet::from_inputs(&inputs, n, m).unwrap();
            let a: Vec<DVector<f64>> = (0..2).map(|_| random_vector(m, &mut rng)).collect();
            let b: Vec<DVector<f64>> = (0..2).map(|_| random_vector(m, &mut rng)).collect();
            let sum: Vec<DVector<f64>> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = set.predict(&sum).unwrap();
            let rhs = set.predict(&a).unwrap() + set.predict(&b).unwrap();
            for i in 0..n {
                prop_assert!((lhs[i] - rhs[i]).abs() <= 1e-12 * lhs[i].abs().max(1.0));
            }
        }

        #[test]
        fn swap_matches_recomputation(seed in 0u64..5000) {
            let mut rng = RngStream::new(seed);
            let (n, m, p) = (12, 4, 3);
            let inputs: Vec<Vec<f64>> = (0..p)
                .map(|_| (0..n + m - 1).map(|_| rng.standard_normal()).collect())
                .collect();
            let set = RegressorSet::from_inputs(&inputs, n, m).unwrap();
            let y = random_vector(n, &mut rng);
            let mut thetas: Vec<DVector<f64>> = (0..p).map(|_| random_vector(m, &mut rng)).collect();
            let mut res = Residual::compute(&y, &set, &thetas).unwrap();

            // A full sweep of swaps must equal recomputation.
            for k in 0..p {
                let new_theta = random_vector(m, &mut rng);
                res.swap_module(set.module(k), &thetas[k], &new_theta).unwrap();
                thetas[k] = new_theta;
            }
            let fresh = Residual::compute(&y, &set, &thetas).unwrap();
            let y_inf = y.amax();
            for i in 0..n {
                prop_assert!((res.vector()[i] - fresh.vector()[i]).abs() < 1e-8 * (1.0 + y_inf));
            }
        }
    }

    #[test]
    fn swap_drift_stays_bounded_over_many_sweeps() {
        let mut rng = RngStream::new(99);
        let (n, m, p) = (20, 5, 4);
        let inputs: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n + m - 1).map(|_| rng.standard_normal()).collect())
            .collect();
        let set = RegressorSet::from_inputs(&inputs, n, m).unwrap();
        let y = random_vector(n, &mut rng);
        let mut thetas: Vec<DVector<f64>> = (0..p).map(|_| random_vector(m, &mut rng)).collect();
        let mut res = Residual::compute(&y, &set, &thetas).unwrap();

        for _ in 0..2500 {
            for k in 0..p {
                let new_theta = random_vector(m, &mut rng);
                res.swap_module(set.module(k), &thetas[k], &new_theta).unwrap();
                thetas[k] = new_theta;
            }
        }
        let fresh = Residual::compute(&y, &set, &thetas).unwrap();
        let drift = (res.vector() - fresh.vector()).amax();
        assert!(
            drift < 1e-6 * (1.0 + y.amax()),
            "drift {drift} after 10^4 swaps"
        );
    }

    #[test]
    fn restored_residual_matches_leave_one_out() {
        let mut rng = RngStream::new(5);
        let (n, m, p) = (9, 3, 3);
        let inputs: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n + m - 1).map(|_| rng.standard_normal()).collect())
            .collect();
        let set = RegressorSet::from_inputs(&inputs, n, m).unwrap();
        let y = random_vector(n, &mut rng);
        let thetas: Vec<DVector<f64>> = (0..p).map(|_| random_vector(m, &mut rng)).collect();
        let res = Residual::compute(&y, &set, &thetas).unwrap();

        for k in 0..p {
            let mut restored = DVector::zeros(n);
            res.with_module_restored(set.module(k), &thetas[k], &mut restored);
            let mut others = thetas.clone();
            others[k] = DVector::zeros(m);
            let direct = &y - set.predict(&others).unwrap();
            assert!((restored - direct).amax() < 1e-10);
        }
    }
}

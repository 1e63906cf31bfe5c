//! Zero-mean spatial Gaussian laws over a fixed station set.
//!
//! The spatiotemporal likelihood, the missing-value sampler and the forecast
//! recursions only need a handful of operations from the spatial covariance;
//! the sparse neighbor factor and the dense Cholesky factor both provide them.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{cov_matrix, CovarianceFunction};
use crate::error::{Error, Result};
use crate::linalg::LN_2PI;
use crate::nngp::FactorMode;
use crate::spatial::SpatialDomain;

pub trait SpatialLaw {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Log-density of residual `r` under the law with covariance multiplied by `scale`.
    fn log_density_scaled(&self, r: &[f64], scale: f64) -> f64;

    /// Sum of log-densities of the columns of `r`, the first under the law
    /// scaled by `first_scale` and the rest unscaled.
    fn log_density_days(&self, r: &DMatrix<f64>, first_scale: f64) -> f64 {
        (0..r.ncols())
            .map(|t| {
                let s = if t == 0 { first_scale } else { 1.0 };
                self.log_density_scaled(r.column(t).as_slice(), s)
            })
            .sum()
    }

    /// `(Q_ss, (Q r)_s)` for the precision `Q` of the unscaled law.
    fn precision_pair(&self, s: usize, r: &[f64]) -> (f64, f64);

    /// One zero-mean draw.
    fn sample_residual(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;

    /// The implied dense covariance. Quadratic memory; meant for small
    /// instances and checks.
    fn covariance(&self) -> DMatrix<f64>;
}

/// Exact Gaussian law from a dense Cholesky factorization.
#[derive(Debug, Clone)]
pub struct DenseLaw {
    chol_l: DMatrix<f64>,
    /// Formed on first use; the likelihood never needs it.
    precision: OnceLock<DMatrix<f64>>,
    log_det: f64,
}

impl DenseLaw {
    pub fn new<K: CovarianceFunction>(domain: &SpatialDomain, kernel: &K, mode: FactorMode) -> Result<Self> {
        let nugget = match mode {
            FactorMode::Latent => None,
            FactorMode::Response(n) => Some(n),
        };
        let locs = domain.locations();
        let cov = cov_matrix(kernel, domain.metric(), locs, locs, nugget)?;
        Self::from_covariance(cov)
    }

    pub fn from_covariance(cov: DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("dense covariance is not positive definite".into()))?;
        let chol_l = chol.l();
        let log_det = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(DenseLaw {
            chol_l,
            precision: OnceLock::new(),
            log_det,
        })
    }

    fn precision(&self) -> &DMatrix<f64> {
        self.precision.get_or_init(|| {
            let n = self.chol_l.nrows();
            let mut inv = DMatrix::identity(n, n);
            self.chol_l.solve_lower_triangular_mut(&mut inv);
            self.chol_l.tr_solve_lower_triangular_mut(&mut inv);
            inv
        })
    }
}

impl SpatialLaw for DenseLaw {
    fn len(&self) -> usize {
        self.chol_l.nrows()
    }

    fn log_density_scaled(&self, r: &[f64], scale: f64) -> f64 {
        let n = r.len();
        let mut z = DVector::from_column_slice(r);
        // L z' = r
        self.chol_l.solve_lower_triangular_mut(&mut z);
        -0.5 * (n as f64 * (LN_2PI + scale.ln()) + self.log_det + z.norm_squared() / scale)
    }

    fn log_density_days(&self, r: &DMatrix<f64>, first_scale: f64) -> f64 {
        let (n, days) = r.shape();
        let mut z = r.clone();
        self.chol_l.solve_lower_triangular_mut(&mut z);
        let quad: f64 = z.column(0).norm_squared() / first_scale
            + (1..days).map(|t| z.column(t).norm_squared()).sum::<f64>();
        -0.5 * ((n * days) as f64 * LN_2PI + n as f64 * first_scale.ln() + days as f64 * self.log_det + quad)
    }

    fn precision_pair(&self, s: usize, r: &[f64]) -> (f64, f64) {
        let q = self.precision();
        let qr = q.row(s).iter().zip(r).map(|(a, b)| a * b).sum();
        (q[(s, s)], qr)
    }

    fn sample_residual(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let n = self.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.chol_l * z).iter().copied().collect()
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.chol_l * self.chol_l.transpose()
    }
}

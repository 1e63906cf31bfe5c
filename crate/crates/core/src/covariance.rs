//! Exponential covariance and dense covariance assembly.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spatial::{Location, Metric};

/// A stationary isotropic covariance evaluated at a distance.
pub trait CovarianceFunction: Clone + Send + Sync {
    /// Covariance at lag `d >= 0`. Callers guarantee the sign of `d`.
    fn eval(&self, d: f64) -> f64;

    /// Marginal variance, `eval(0)`.
    fn variance(&self) -> f64 {
        self.eval(0.0)
    }
}

/// `σ² exp(-d / l)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialKernel {
    pub sigma2: f64,
    pub lengthscale: f64,
}

impl ExponentialKernel {
    pub fn new(sigma2: f64, lengthscale: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Domain(format!("partial sill must be positive, got {sigma2}")));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::Domain(format!("length-scale must be positive, got {lengthscale}")));
        }
        Ok(ExponentialKernel {
            sigma2,
            lengthscale,
        })
    }

    /// Checked evaluation; negative distances are rejected.
    pub fn cov(&self, d: f64) -> Result<f64> {
        if !(d >= 0.0) {
            return Err(Error::Domain(format!("negative or NaN distance {d}")));
        }
        Ok(self.eval(d))
    }
}

impl CovarianceFunction for ExponentialKernel {
    #[inline]
    fn eval(&self, d: f64) -> f64 {
        self.sigma2 * (-d / self.lengthscale).exp()
    }

    fn variance(&self) -> f64 {
        self.sigma2
    }
}

/// Observation-error variance τ².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nugget {
    pub tau2: f64,
}

impl Nugget {
    pub fn new(tau2: f64) -> Result<Self> {
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(Error::Domain(format!("nugget must be nonnegative, got {tau2}")));
        }
        Ok(Nugget { tau2 })
    }
}

/// Covariance between `a` and `b`; the nugget is only allowed when both lists
/// are the same points, in which case it is added on the diagonal.
pub fn cov_matrix<K: CovarianceFunction>(
    kernel: &K,
    metric: Metric,
    a: &[Location],
    b: &[Location],
    nugget: Option<Nugget>,
) -> Result<DMatrix<f64>> {
    let same = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y);
    if nugget.is_some() && !same {
        return Err(Error::Usage(
            "a nugget can only be added to a square covariance of a point set with itself".into(),
        ));
    }
    let tau2 = nugget.map_or(0.0, |n| n.tau2);
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        if same && i == j {
            kernel.variance() + tau2
        } else {
            kernel.eval(metric.distance(&a[i], &b[j]))
        }
    }))
}

//! Random-walk Metropolis with covariance adaptation during warmup.
//!
//! The proposal is `x' = x + exp(log_scale) L z` with `L Lᵀ` the scaled
//! empirical covariance of recent warmup draws (`2.38² / d` times). The
//! global scale follows a Robbins–Monro recursion towards the target
//! acceptance rate. Both are frozen once warmup ends, so post-warmup draws
//! come from a fixed Markov kernel.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct AdaptiveMetropolis {
    dim: usize,
    chol: DMatrix<f64>,
    log_scale: f64,
    target: f64,
    warmup: usize,
    /// Iterations at which the proposal covariance is re-estimated.
    updates: Vec<usize>,
    window_start: usize,
    window: Welford,
    rm_step: usize,
}

impl AdaptiveMetropolis {
    /// `initial_sd` gives the diagonal proposal used until the first update.
    pub fn new(initial_sd: &[f64], warmup: usize, target: f64) -> Self {
        let dim = initial_sd.len();
        let chol = DMatrix::from_diagonal(&DVector::from_column_slice(initial_sd));
        let updates = [0.2, 0.35, 0.55, 0.8]
            .iter()
            .map(|f| (f * warmup as f64) as usize)
            .filter(|&u| u >= 2 * dim.max(5))
            .collect();
        AdaptiveMetropolis {
            dim,
            chol,
            log_scale: 0.0,
            target,
            warmup,
            updates,
            window_start: warmup / 10,
            window: Welford::new(dim),
            rm_step: 0,
        }
    }

    pub fn propose<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &self.chol * z * self.log_scale.exp();
        x.iter().zip(step.iter()).map(|(a, b)| a + b).collect()
    }

    /// Feeds back iteration `iter`'s state and acceptance probability.
    pub fn adapt(&mut self, iter: usize, state: &[f64], accept_prob: f64) {
        if iter >= self.warmup {
            return;
        }
        self.rm_step += 1;
        let gamma = (self.rm_step as f64 + 10.0).powf(-0.6);
        self.log_scale += gamma * (accept_prob - self.target) * 3.0;
        self.log_scale = self.log_scale.clamp(-12.0, 6.0);
        if iter >= self.window_start {
            self.window.push(state);
        }
        if self.updates.first() == Some(&iter) {
            self.updates.remove(0);
            if let Some(cov) = self.window.covariance() {
                let d = self.dim as f64;
                let mut c = cov * (2.38 * 2.38 / d);
                let ridge = 1e-10 + 1e-8 * c.diagonal().max();
                for k in 0..self.dim {
                    c[(k, k)] += ridge;
                }
                if let Some(ch) = c.cholesky() {
                    self.chol = ch.l();
                    self.log_scale = 0.0;
                    self.rm_step = 0;
                }
            }
            self.window = Welford::new(self.dim);
            self.window_start = iter + 1;
        }
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }
}

#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.n > self.mean.len() + 2).then(|| &self.m2 / (self.n as f64 - 1.0))
    }
}

/// Metropolis acceptance probability from log-target values.
pub fn accept_prob(current: f64, proposed: f64) -> f64 {
    if proposed.is_nan() || proposed == f64::NEG_INFINITY {
        0.0
    } else {
        (proposed - current).exp().min(1.0)
    }
}

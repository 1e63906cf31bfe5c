//! Dense Gaussian oracles shared by the integration tests. Everything here
//! builds full covariance matrices and conditions by brute force.
#![allow(dead_code)]

pub mod scenarios;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stnngp::covariance::{ExponentialKernel, Nugget};
use stnngp::inference::PosteriorSamples;
use stnngp::nngp::{factorize, FactorMode};
use stnngp::spatial::{Location, Metric, SpatialDomain};
use stnngp::stmodel::{DesignTensor, ModelParams, ResponsePanel};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_sites(rng: &mut ChaCha8Rng, n: usize, prefix: &str) -> Vec<Location> {
    (0..n)
        .map(|i| Location::planar(format!("{prefix}{i}"), rng.random(), rng.random()).unwrap())
        .collect()
}

/// `σ² exp(-d / l)` between two point lists.
pub fn exp_cov(a: &[Location], b: &[Location], sigma2: f64, l: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let d = Metric::Euclidean.distance(&a[i], &b[j]);
        sigma2 * (-d / l).exp()
    })
}

/// Response covariance `C + τ² I` of one point list.
pub fn response_cov(a: &[Location], p: &ModelParams) -> DMatrix<f64> {
    exp_cov(a, a, p.sigma2, p.lengthscale) + DMatrix::identity(a.len(), a.len()) * p.tau2
}

pub fn mvn_logpdf(cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let c = cov.clone().cholesky().expect("oracle covariance is positive definite");
    let logdet = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * LN_2PI + logdet + x.dot(&c.solve(x)))
}

/// Covariance of the AR(1) error `e_t = φ e_{t-1} + r_t` stacked time-major
/// (`t * n + i`), with `r_t ~ N(0, scale_t Σ)` independent over time and
/// `scale_0 = first_scale`, built as `L diag(scale_t Σ) Lᵀ`.
pub fn ar_joint(sigma: &DMatrix<f64>, phi: f64, days: usize, first_scale: f64) -> DMatrix<f64> {
    let n = sigma.nrows();
    let mut l = DMatrix::zeros(n * days, n * days);
    for t in 0..days {
        for u in 0..=t {
            let c = phi.powi((t - u) as i32);
            for i in 0..n {
                l[(t * n + i, u * n + i)] = c;
            }
        }
    }
    let mut d = DMatrix::zeros(n * days, n * days);
    for u in 0..days {
        let s = if u == 0 { first_scale } else { 1.0 };
        d.view_mut((u * n, u * n), (n, n)).copy_from(&(sigma * s));
    }
    &l * d * l.transpose()
}

/// Conditional mean and variance of component `target` given components
/// `obs` equal to `vals`, for a zero-mean Gaussian with covariance `cov`.
pub fn condition(cov: &DMatrix<f64>, obs: &[usize], vals: &[f64], target: usize) -> (f64, f64) {
    let s = cov.select_rows(obs).select_columns(obs);
    let c = DVector::from_iterator(obs.len(), obs.iter().map(|&o| cov[(target, o)]));
    let ch = s.cholesky().expect("observed block is positive definite");
    let w = ch.solve(&c);
    let v = DVector::from_column_slice(vals);
    (w.dot(&v), cov[(target, target)] - w.dot(&c))
}

/// A design with an intercept and one covariate that varies by station and day.
pub fn toy_design(rng: &mut ChaCha8Rng, n: usize, days: usize) -> DesignTensor {
    let x = (0..days)
        .map(|_| DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 }))
        .collect();
    DesignTensor::new(x, vec!["intercept".into(), "x".into()]).unwrap()
}

pub fn random_params(rng: &mut ChaCha8Rng) -> ModelParams {
    ModelParams {
        beta: vec![rng.random::<f64>() - 0.5, 1.0 + rng.random::<f64>()],
        phi: 1.6 * rng.random::<f64>() - 0.8,
        sigma2: 0.5 + rng.random::<f64>(),
        tau2: 0.05 + 0.3 * rng.random::<f64>(),
        lengthscale: 0.1 + 0.5 * rng.random::<f64>(),
    }
}

/// Panel of arbitrary values with the given cells missing.
pub fn toy_panel(rng: &mut ChaCha8Rng, n: usize, days: usize, missing: &[(usize, usize)]) -> ResponsePanel {
    let rows: Vec<Vec<Option<f64>>> = (0..n)
        .map(|i| {
            (0..days)
                .map(|t| (!missing.contains(&(i, t))).then(|| rng.random::<f64>() * 4.0 - 2.0))
                .collect()
        })
        .collect();
    ResponsePanel::from_rows(&rows).unwrap()
}

/// Posterior samples from explicit draws and imputations, one chain.
pub fn samples_from(draws: Vec<ModelParams>, panel: &ResponsePanel, imputed: Vec<Vec<f64>>) -> PosteriorSamples {
    let p = draws[0].beta.len();
    PosteriorSamples {
        param_names: ModelParams::names(p),
        draws: vec![draws],
        missing_cells: panel.missing_cells(),
        imputed: vec![imputed],
        acceptance: vec![0.0],
        diagnostics: Vec::new(),
        elapsed_secs: 0.0,
    }
}

pub fn full_domain(locs: Vec<Location>) -> SpatialDomain {
    let m = locs.len().saturating_sub(1).max(1);
    SpatialDomain::new(locs, m, Metric::Euclidean).unwrap()
}

/// NNGP log-density with full neighbor sets next to the dense one for a
/// random instance of size `n`.
pub fn vecchia_case(seed: u64, n: usize, response: bool) -> (f64, f64) {
    let mut r = rng(seed);
    let locs = uniform_sites(&mut r, n, "s");
    let domain = full_domain(locs);
    let p = random_params(&mut r);
    let kernel = ExponentialKernel::new(p.sigma2, p.lengthscale).unwrap();
    let mode = if response { FactorMode::Response(Nugget::new(p.tau2).unwrap()) } else { FactorMode::Latent };
    let f = factorize(&domain, &kernel, mode).unwrap();
    let w: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 3.0 - 1.5).collect();
    let mean: Vec<f64> = (0..n).map(|_| r.random::<f64>() - 0.5).collect();
    let got = f.log_density(&w, &mean).unwrap();
    let mut cov = exp_cov(domain.locations(), domain.locations(), p.sigma2, p.lengthscale);
    if response {
        for i in 0..n {
            cov[(i, i)] += p.tau2;
        }
    }
    let x = DVector::from_iterator(n, w.iter().zip(&mean).map(|(a, b)| a - b));
    (got, mvn_logpdf(&cov, &x))
}

/// Twenty instances with `n` between 2 and 60, alternating response and
/// latent mode: `(seed, n, response)`.
pub fn vecchia_instances() -> Vec<(u64, usize, bool)> {
    (0..20u64).map(|k| (100 + k, 2 + (k as usize * 7) % 59, k % 2 == 0)).collect()
}

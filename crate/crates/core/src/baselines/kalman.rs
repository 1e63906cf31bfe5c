//! Linear-Gaussian state space with AR(1) state dynamics:
//!
//! ```text
//! z_t = ρ z_{t-1} + ξ_t,      ξ_t ~ N(0, Q),   z_1 ~ N(0, Q / (1 - ρ²))
//! v_t = H z_t + ε_t,          ε_t ~ N(0, τ² I)
//! ```
//!
//! Observations may be missing cell by cell. The filter works in
//! information form so each update only factorizes `k × k` matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::LN_2PI;

#[derive(Debug, Clone)]
pub struct StateSpace {
    /// `n × k` emission matrix.
    pub h: DMatrix<f64>,
    /// `k × k` innovation covariance.
    pub q: DMatrix<f64>,
    pub rho: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// Filtered means `E[z_t | v_1..v_t]`.
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

pub(crate) fn chol(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c);
    }
    let scale = sym.diagonal().abs().max().max(1e-300);
    for k in [1e-12, 1e-10, 1e-8] {
        let mut j = sym.clone();
        for i in 0..j.nrows() {
            j[(i, i)] += k * scale;
        }
        if let Some(c) = j.cholesky() {
            return Ok(c);
        }
    }
    Err(Error::Numerical(format!("{what} is not positive definite")))
}

pub(crate) fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

impl StateSpace {
    pub fn k(&self) -> usize {
        self.q.nrows()
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    /// Forward pass over `resid` (`n × T`); `observed(i, t)` masks cells.
    pub fn filter(&self, resid: &DMatrix<f64>, observed: impl Fn(usize, usize) -> bool) -> Result<FilterOutput> {
        let (n, days, k) = (self.n(), resid.ncols(), self.k());
        if resid.nrows() != n {
            return Err(Error::Dimension(format!("{} residual rows for {n} emissions", resid.nrows())));
        }
        let mut means = Vec::with_capacity(days);
        let mut covs = Vec::with_capacity(days);
        let mut loglik = 0.0;
        let mut m_pred = DVector::zeros(k);
        let mut p_pred = &self.q / (1.0 - self.rho * self.rho);
        for t in 0..days {
            let obs: Vec<usize> = (0..n).filter(|&i| observed(i, t)).collect();
            let (m, p) = if obs.is_empty() {
                (m_pred.clone(), p_pred.clone())
            } else {
                let ho = self.h.select_rows(&obs);
                let v = DVector::from_iterator(obs.len(), obs.iter().map(|&i| resid[(i, t)]));
                let cp = chol(&p_pred, "predicted state covariance")?;
                let p_inv = cp.inverse();
                let lambda = &p_inv + ho.transpose() * &ho / self.tau2;
                let cl = chol(&lambda, "posterior state precision")?;
                let p = cl.inverse();
                let e = &v - &ho * &m_pred;
                let u = ho.transpose() * &e / self.tau2;
                let quad = e.norm_squared() / self.tau2 - u.dot(&cl.solve(&u));
                let ld = log_det(&cl) + log_det(&cp) + obs.len() as f64 * self.tau2.ln();
                loglik -= 0.5 * (obs.len() as f64 * LN_2PI + ld + quad);
                let b = &p_inv * &m_pred + ho.transpose() * &v / self.tau2;
                (&p * b, p)
            };
            m_pred = &m * self.rho;
            p_pred = &p * (self.rho * self.rho) + &self.q;
            means.push(m);
            covs.push(p);
        }
        Ok(FilterOutput { means, covs, loglik })
    }

    fn predicted_cov(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        p * (self.rho * self.rho) + &self.q
    }

    /// Rauch–Tung–Striebel smoothed means and covariances.
    pub fn smooth(&self, f: &FilterOutput) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
        let days = f.means.len();
        let mut ms = f.means.clone();
        let mut ps = f.covs.clone();
        for t in (0..days.saturating_sub(1)).rev() {
            let pp = self.predicted_cov(&f.covs[t]);
            let cp = chol(&pp, "predicted state covariance")?;
            // J = ρ P_t P⁻¹_{t+1}
            let j = cp.solve(&(&f.covs[t] * self.rho)).transpose();
            ms[t] = &f.means[t] + &j * (&ms[t + 1] - &f.means[t] * self.rho);
            ps[t] = &f.covs[t] + &j * (&ps[t + 1] - &pp) * j.transpose();
        }
        Ok((ms, ps))
    }

    /// One joint draw of the state path given the filter output.
    pub fn ffbs<R: Rng + ?Sized>(&self, f: &FilterOutput, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let days = f.means.len();
        let k = self.k();
        let mut out = vec![DVector::zeros(k); days];
        if days == 0 {
            return Ok(out);
        }
        let draw = |mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R| -> Result<DVector<f64>> {
            let c = chol(cov, "state draw covariance")?;
            let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            Ok(mean + c.l() * z)
        };
        out[days - 1] = draw(&f.means[days - 1], &f.covs[days - 1], rng)?;
        for t in (0..days - 1).rev() {
            let pp = self.predicted_cov(&f.covs[t]);
            let cp = chol(&pp, "predicted state covariance")?;
            let j = cp.solve(&(&f.covs[t] * self.rho)).transpose();
            let mean = &f.means[t] + &j * (&out[t + 1] - &f.means[t] * self.rho);
            let cov = &f.covs[t] - &j * &pp * j.transpose();
            out[t] = draw(&mean, &cov, rng)?;
        }
        Ok(out)
    }
}

//! The AR(1) spatiotemporal response model.
//!
//! ```text
//! y_t | y_{t-1} ~ N(μ_t, C̃ + τ² I),   μ_t = X_t β + φ (y_{t-1} - X_{t-1} β)
//! ```
//!
//! with `C̃` the neighbor approximation of the exponential covariance. Writing
//! `e_t = y_t - X_t β`, the innovations `r_t = e_t - φ e_{t-1}` are i.i.d.
//! across days, which is how every quantity here is computed. The first day
//! uses the stationary law `N(X_1 β, (C̃ + τ² I) / (1 - φ²))` unless the
//! diffuse variant is selected.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::covariance::{ExponentialKernel, Nugget};
use crate::error::{Error, Result};
use crate::law::{DenseLaw, SpatialLaw};
use crate::nngp::{factorize, FactorMode};
use crate::spatial::SpatialDomain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Regression coefficients, intercept first.
    pub beta: Vec<f64>,
    pub phi: f64,
    pub sigma2: f64,
    pub tau2: f64,
    pub lengthscale: f64,
}

impl ModelParams {
    pub fn kernel(&self) -> Result<ExponentialKernel> {
        ExponentialKernel::new(self.sigma2, self.lengthscale)
    }

    pub fn nugget(&self) -> Result<Nugget> {
        Nugget::new(self.tau2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi.abs() < 1.0) {
            return Err(Error::Domain(format!("|phi| must be < 1, got {}", self.phi)));
        }
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(Error::Domain(format!("tau2 must be positive, got {}", self.tau2)));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("beta must be finite".into()));
        }
        self.kernel().map(|_| ())
    }

    /// Names in the order used by [`ModelParams::to_vec`].
    pub fn names(p: usize) -> Vec<String> {
        let mut v: Vec<String> = (0..p).map(|j| format!("beta{j}")).collect();
        v.extend(["phi", "sigma2", "tau2", "lengthscale"].map(String::from));
        v
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.extend([self.phi, self.sigma2, self.tau2, self.lengthscale]);
        v
    }

    pub fn from_vec(v: &[f64]) -> Self {
        let p = v.len() - 4;
        ModelParams {
            beta: v[..p].to_vec(),
            phi: v[p],
            sigma2: v[p + 1],
            tau2: v[p + 2],
            lengthscale: v[p + 3],
        }
    }
}

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Standard deviation of the independent normal prior on each β.
    pub beta_sd: f64,
    /// Inverse-gamma (shape, scale) for σ².
    pub sigma2_ig: (f64, f64),
    /// Inverse-gamma (shape, scale) for τ².
    pub tau2_ig: (f64, f64),
    /// Uniform support of the length-scale.
    pub lengthscale: (f64, f64),
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            beta_sd: 10.0,
            sigma2_ig: (2.0, 1.0),
            tau2_ig: (2.0, 0.1),
            lengthscale: (0.1, 300.0),
        }
    }
}

impl PriorSpec {
    pub fn with_lengthscale(mut self, low: f64, high: f64) -> Self {
        self.lengthscale = (low, high);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.beta_sd,
            self.sigma2_ig.0,
            self.sigma2_ig.1,
            self.tau2_ig.0,
            self.tau2_ig.1,
            self.lengthscale.0,
        ];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("prior hyperparameters must be positive".into()));
        }
        if !(self.lengthscale.1 > self.lengthscale.0) {
            return Err(Error::Config("length-scale prior bounds must be increasing".into()));
        }
        Ok(())
    }

    /// Whether `params` lies strictly inside the prior support.
    pub fn in_support(&self, params: &ModelParams) -> bool {
        params.phi.abs() < 1.0
            && params.sigma2 > 0.0
            && params.tau2 > 0.0
            && params.lengthscale > self.lengthscale.0
            && params.lengthscale < self.lengthscale.1
            && params.beta.iter().all(|b| b.is_finite())
            && params.sigma2.is_finite()
            && params.tau2.is_finite()
    }

    /// Sum of log prior densities; `-inf` outside the support.
    pub fn log_density(&self, params: &ModelParams) -> f64 {
        if !self.in_support(params) {
            return f64::NEG_INFINITY;
        }
        let var_b = self.beta_sd * self.beta_sd;
        let beta: f64 = params
            .beta
            .iter()
            .map(|b| -0.5 * (crate::linalg::LN_2PI + var_b.ln() + b * b / var_b))
            .sum();
        let phi = -(2.0f64).ln();
        let l = -(self.lengthscale.1 - self.lengthscale.0).ln();
        beta + phi + inv_gamma_ln_pdf(params.sigma2, self.sigma2_ig) + inv_gamma_ln_pdf(params.tau2, self.tau2_ig) + l
    }

    /// Maps parameters to the unconstrained sampling scale.
    pub fn to_unconstrained(&self, params: &ModelParams) -> Vec<f64> {
        let (lo, hi) = self.lengthscale;
        let mut u = params.beta.clone();
        u.push(logit((params.phi + 1.0) / 2.0));
        u.push(params.sigma2.ln());
        u.push(params.tau2.ln());
        u.push(logit((params.lengthscale - lo) / (hi - lo)));
        u
    }

    /// Inverse of [`PriorSpec::to_unconstrained`] with the log-Jacobian of the map.
    pub fn from_unconstrained(&self, u: &[f64]) -> (ModelParams, f64) {
        let p = u.len() - 4;
        let (lo, hi) = self.lengthscale;
        let (sp, lsp, l1sp) = sigmoid_parts(u[p]);
        let (sl, lsl, l1sl) = sigmoid_parts(u[p + 3]);
        let params = ModelParams {
            beta: u[..p].to_vec(),
            phi: (2.0 * sp - 1.0).clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON),
            sigma2: u[p + 1].exp(),
            tau2: u[p + 2].exp(),
            lengthscale: lo + (hi - lo) * sl,
        };
        let log_jac = (2.0f64).ln() + lsp + l1sp + u[p + 1] + u[p + 2] + (hi - lo).ln() + lsl + l1sl;
        (params, log_jac)
    }
}

/// Log density of the inverse-gamma with `(shape, scale)`:
/// `b^a / Γ(a) x^(-a-1) exp(-b/x)`.
pub fn inv_gamma_ln_pdf(x: f64, (a, b): (f64, f64)) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `(σ(x), ln σ(x), ln(1 - σ(x)))` computed without overflow.
fn sigmoid_parts(x: f64) -> (f64, f64, f64) {
    let ln_s = -softplus(-x);
    let ln_1s = -softplus(x);
    (ln_s.exp(), ln_s, ln_1s)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Law of the first day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialLaw {
    /// `(C̃ + τ² I) / (1 - φ²)`.
    Stationary,
    /// `C̃ + τ² I`.
    Diffuse,
}

impl InitialLaw {
    pub fn variance_scale(self, phi: f64) -> f64 {
        match self {
            InitialLaw::Stationary => 1.0 / (1.0 - phi * phi),
            InitialLaw::Diffuse => 1.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "stationary" => Ok(InitialLaw::Stationary),
            "diffuse" => Ok(InitialLaw::Diffuse),
            other => Err(Error::Config(format!("unknown initial law `{other}`"))),
        }
    }
}

/// How the spatial covariance is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approximation {
    /// Neighbor factorization with the domain's budget `m`.
    Nngp,
    /// Full dense covariance (single-basin GP).
    Dense,
}

/// Per-day design matrices `X_t` (stations in model order × covariates).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignTensor {
    x: Vec<DMatrix<f64>>,
    names: Vec<String>,
}

impl DesignTensor {
    pub fn new(x: Vec<DMatrix<f64>>, names: Vec<String>) -> Result<Self> {
        let first = x
            .first()
            .ok_or_else(|| Error::Invalid("design tensor needs at least one day".into()))?;
        let (n, p) = first.shape();
        if names.len() != p {
            return Err(Error::Dimension(format!("{} covariate names for {p} columns", names.len())));
        }
        for (t, xt) in x.iter().enumerate() {
            if xt.shape() != (n, p) {
                return Err(Error::Dimension(format!(
                    "day {t}: design is {:?}, expected ({n}, {p})",
                    xt.shape()
                )));
            }
            if xt.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("day {t}: non-finite covariate")));
            }
        }
        let has_intercept = (0..p).any(|j| x.iter().all(|xt| xt.column(j).iter().all(|&v| v == 1.0)));
        if !has_intercept {
            return Err(Error::Invalid("design has no intercept column of ones".into()));
        }
        Ok(DesignTensor { x, names })
    }

    pub fn n(&self) -> usize {
        self.x[0].nrows()
    }

    pub fn p(&self) -> usize {
        self.x[0].ncols()
    }

    pub fn days(&self) -> usize {
        self.x.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn day(&self, t: usize) -> &DMatrix<f64> {
        &self.x[t]
    }

    /// `X_t β`.
    pub fn xb(&self, t: usize, beta: &[f64]) -> Vec<f64> {
        let xt = &self.x[t];
        (0..xt.nrows())
            .map(|i| (0..xt.ncols()).map(|j| xt[(i, j)] * beta[j]).sum())
            .collect()
    }

    /// Covariate row of station `i` on day `t`.
    pub fn row(&self, i: usize, t: usize) -> Vec<f64> {
        self.x[t].row(i).iter().copied().collect()
    }

    /// The first `days` days.
    pub fn truncate(&self, days: usize) -> Self {
        self.slice_days(0, days)
    }

    /// Days `start..end`.
    pub fn slice_days(&self, start: usize, end: usize) -> Self {
        DesignTensor {
            x: self.x[start..end].to_vec(),
            names: self.names.clone(),
        }
    }
}

/// Response matrix (stations in model order × days) with a missingness mask.
///
/// Missing cells carry a fill value that the sampler overwrites.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePanel {
    values: DMatrix<f64>,
    observed: Vec<bool>,
}

impl ResponsePanel {
    /// Builds from per-station rows of optional values.
    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Dimension("ragged response rows".into()));
        }
        let mut values = DMatrix::zeros(n, t);
        let mut observed = vec![false; n * t];
        for (i, row) in rows.iter().enumerate() {
            for (d, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(Error::Invalid(format!("non-finite response at ({i}, {d})")));
                    }
                    values[(i, d)] = *v;
                    observed[d * n + i] = true;
                }
            }
        }
        Ok(ResponsePanel { values, observed })
    }

    pub fn complete(values: DMatrix<f64>) -> Self {
        let observed = vec![true; values.len()];
        ResponsePanel { values, observed }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn days(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.observed[t * self.n() + i]
    }

    /// Current value, observed or filled.
    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[(i, t)]
    }

    pub fn observed_value(&self, i: usize, t: usize) -> Option<f64> {
        self.is_observed(i, t).then(|| self.values[(i, t)])
    }

    /// Overwrites the fill of a missing cell.
    pub fn fill(&mut self, i: usize, t: usize, v: f64) {
        debug_assert!(!self.is_observed(i, t));
        self.values[(i, t)] = v;
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn day(&self, t: usize) -> Vec<f64> {
        self.values.column(t).iter().copied().collect()
    }

    /// Missing `(station, day)` cells in column-major order.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        self.observed
            .iter()
            .enumerate()
            .filter(|(_, o)| !**o)
            .map(|(k, _)| (k % n, k / n))
            .collect()
    }

    pub fn n_missing(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn n_observed_in_row(&self, i: usize) -> usize {
        (0..self.days()).filter(|&t| self.is_observed(i, t)).count()
    }
}

/// `μ_t = X_t β + φ (y_{t-1} - X_{t-1} β)` for every station.
pub fn mean_t(
    x_t: &DMatrix<f64>,
    x_prev: &DMatrix<f64>,
    y_prev: &[f64],
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let p = params.beta.len();
    if x_t.ncols() != p || x_prev.ncols() != p || x_t.nrows() != y_prev.len() || x_prev.nrows() != y_prev.len() {
        return Err(Error::Dimension("mean_t: design/response/beta sizes disagree".into()));
    }
    Ok((0..y_prev.len())
        .map(|i| {
            let xb: f64 = (0..p).map(|j| x_t[(i, j)] * params.beta[j]).sum();
            let xb_prev: f64 = (0..p).map(|j| x_prev[(i, j)] * params.beta[j]).sum();
            xb + params.phi * (y_prev[i] - xb_prev)
        })
        .collect())
}

/// Latent-form step `y_t = μ_t + w_t + ε_t`.
pub fn latent_step(
    y_prev: &[f64],
    x_t: &DMatrix<f64>,
    x_prev: &DMatrix<f64>,
    params: &ModelParams,
    w_t: &[f64],
    eps_t: &[f64],
) -> Result<Vec<f64>> {
    if w_t.len() != y_prev.len() || eps_t.len() != y_prev.len() {
        return Err(Error::Dimension("latent_step: field and noise lengths disagree".into()));
    }
    let mu = mean_t(x_t, x_prev, y_prev, params)?;
    Ok(mu.iter().zip(w_t).zip(eps_t).map(|((m, w), e)| m + w + e).collect())
}

/// A fitted-model context: geometry, design and structural choices.
#[derive(Debug, Clone, Copy)]
pub struct StModel<'a> {
    pub domain: &'a SpatialDomain,
    pub design: &'a DesignTensor,
    pub init: InitialLaw,
    pub approx: Approximation,
}

impl<'a> StModel<'a> {
    pub fn new(domain: &'a SpatialDomain, design: &'a DesignTensor) -> Self {
        StModel {
            domain,
            design,
            init: InitialLaw::Stationary,
            approx: Approximation::Nngp,
        }
    }

    pub fn with_init(mut self, init: InitialLaw) -> Self {
        self.init = init;
        self
    }

    pub fn with_approx(mut self, approx: Approximation) -> Self {
        self.approx = approx;
        self
    }

    /// Response-mode spatial law for `params`.
    pub fn response_law(&self, params: &ModelParams) -> Result<Box<dyn SpatialLaw + 'a>> {
        self.law(params, FactorMode::Response(params.nugget()?))
    }

    pub fn latent_law(&self, params: &ModelParams) -> Result<Box<dyn SpatialLaw + 'a>> {
        self.law(params, FactorMode::Latent)
    }

    fn law(&self, params: &ModelParams, mode: FactorMode) -> Result<Box<dyn SpatialLaw + 'a>> {
        let kernel = params.kernel()?;
        Ok(match self.approx {
            Approximation::Nngp => Box::new(factorize(self.domain, &kernel, mode)?),
            Approximation::Dense => Box::new(DenseLaw::new(self.domain, &kernel, mode)?),
        })
    }

    fn check_dims(&self, panel: &ResponsePanel, params: &ModelParams) -> Result<()> {
        if panel.n() != self.domain.len() || self.design.n() != self.domain.len() {
            return Err(Error::Dimension(format!(
                "panel has {} stations, design {}, domain {}",
                panel.n(),
                self.design.n(),
                self.domain.len()
            )));
        }
        if panel.days() == 0 || panel.days() > self.design.days() {
            return Err(Error::Dimension(format!(
                "panel has {} days but design covers {}",
                panel.days(),
                self.design.days()
            )));
        }
        if params.beta.len() != self.design.p() {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} covariates",
                params.beta.len(),
                self.design.p()
            )));
        }
        Ok(())
    }

    /// Innovations `r_t` (n × T), using current fills for missing cells.
    pub fn innovations(&self, panel: &ResponsePanel, params: &ModelParams) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(panel.n(), panel.days());
        self.innovations_into(panel, params, &mut r);
        r
    }

    /// [`StModel::innovations`] written into an existing n × T buffer.
    pub fn innovations_into(&self, panel: &ResponsePanel, params: &ModelParams, r: &mut DMatrix<f64>) {
        let (n, days) = (panel.n(), panel.days());
        assert_eq!(r.shape(), (n, days), "innovation buffer shape");
        let y = panel.values().as_slice();
        let mut prev = vec![0.0; n];
        for (t, col) in r.as_mut_slice().chunks_exact_mut(n).enumerate() {
            col.copy_from_slice(&y[t * n..(t + 1) * n]);
            let x = self.design.day(t).as_slice();
            for (b, xj) in params.beta.iter().zip(x.chunks_exact(n)) {
                for (c, v) in col.iter_mut().zip(xj) {
                    *c -= b * v;
                }
            }
            // col holds e_t; turn it into e_t - φ e_{t-1}
            for (c, p) in col.iter_mut().zip(prev.iter_mut()) {
                let e = *c;
                *c = e - params.phi * *p;
                *p = e;
            }
        }
    }

    /// Log-likelihood of a complete panel.
    pub fn log_marginal(&self, panel: &ResponsePanel, params: &ModelParams) -> Result<f64> {
        if panel.n_missing() > 0 {
            return Err(Error::Usage(format!(
                "log_marginal needs a complete panel; {} cells are missing",
                panel.n_missing()
            )));
        }
        self.log_marginal_filled(panel, params)
    }

    /// Log-likelihood treating current fills of missing cells as data.
    pub fn log_marginal_filled(&self, panel: &ResponsePanel, params: &ModelParams) -> Result<f64> {
        self.check_dims(panel, params)?;
        params.validate()?;
        let law = self.response_law(params)?;
        let r = self.innovations(panel, params);
        Ok(self.log_marginal_with(law.as_ref(), &r, params.phi))
    }

    pub(crate) fn log_marginal_with(&self, law: &dyn SpatialLaw, r: &DMatrix<f64>, phi: f64) -> f64 {
        law.log_density_days(r, self.init.variance_scale(phi))
    }

    /// Log-likelihood plus log-prior; `-inf` outside the prior support.
    pub fn log_posterior(&self, panel: &ResponsePanel, params: &ModelParams, prior: &PriorSpec) -> Result<f64> {
        let lp = prior.log_density(params);
        if !lp.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(self.log_marginal_filled(panel, params)? + lp)
    }

    /// Full conditional `(mean, variance)` of the response at a cell given
    /// every other current value, under the response-mode law.
    pub fn cell_conditional(
        &self,
        law: &dyn SpatialLaw,
        r: &DMatrix<f64>,
        params: &ModelParams,
        s: usize,
        t: usize,
        current: f64,
    ) -> (f64, f64) {
        let days = r.ncols();
        let xb = dot_row(self.design.day(t), s, &params.beta);
        let x_cur = current - xb;
        let mut prec = 0.0;
        let mut lin = 0.0;
        let scale_t = if t == 0 { self.init.variance_scale(params.phi) } else { 1.0 };
        let mut add = |col: usize, coef: f64, scale: f64| {
            let rc = r.column(col);
            let (qss, qr) = law.precision_pair(s, rc.as_slice());
            prec += coef * coef * qss / scale;
            lin -= coef * (qr - qss * coef * x_cur) / scale;
        };
        add(t, 1.0, scale_t);
        if t + 1 < days {
            add(t + 1, -params.phi, 1.0);
        }
        (xb + lin / prec, 1.0 / prec)
    }
}

fn dot_row(x: &DMatrix<f64>, i: usize, beta: &[f64]) -> f64 {
    (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum()
}

/// Log-likelihood with the default neighbor approximation and stationary start.
pub fn log_marginal(
    panel: &ResponsePanel,
    design: &DesignTensor,
    params: &ModelParams,
    domain: &SpatialDomain,
) -> Result<f64> {
    StModel::new(domain, design).log_marginal(panel, params)
}

pub fn log_posterior(
    panel: &ResponsePanel,
    design: &DesignTensor,
    params: &ModelParams,
    prior: &PriorSpec,
    domain: &SpatialDomain,
) -> Result<f64> {
    StModel::new(domain, design).log_posterior(panel, params, prior)
}

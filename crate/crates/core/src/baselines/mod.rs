//! Comparison models: a knot-based predictive process with AR(1) knot
//! dynamics (GPP), a dense GP with AR(1) responses (GP1) and a dense GP
//! whose latent field follows an AR(1) in time (GP2).
//!
//! GPP and GP2 share one linear-Gaussian state space. Hyperparameters are
//! updated by adaptive Metropolis on the Kalman-filter likelihood (the
//! latent path integrated out); a latent path is drawn by FFBS at every
//! retained draw. GP1 is the response model with a dense covariance, so
//! it reuses `inference` and `predict` directly.

pub mod kalman;
pub mod knots;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::cov_matrix;
use crate::error::{Error, Result};
use crate::inference::sampler::{accept_prob, AdaptiveMetropolis};
use crate::inference::{self, chain_rng, ols_start, McmcConfig, PosteriorSamples};
use crate::predict::{PredictionRequest, Predictions, PredictiveDraws, Predictor, Scale, TargetPrediction};
use crate::spatial::{Location, SpatialDomain};
use crate::stmodel::{Approximation, DesignTensor, ModelParams, PriorSpec, ResponsePanel, StModel};

pub use kalman::{FilterOutput, StateSpace};
pub use knots::make_knot_grid;

pub const DEFAULT_DENSE_CEILING: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Gpp,
    Gp1,
    Gp2,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gpp" => Ok(BaselineKind::Gpp),
            "gp1" => Ok(BaselineKind::Gp1),
            "gp2" => Ok(BaselineKind::Gp2),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Gpp => "gpp",
            BaselineKind::Gp1 => "gp1",
            BaselineKind::Gp2 => "gp2",
        }
    }
}

/// Knot locations. The cross-covariance `A` and knot covariance `Σ_z`
/// depend on the kernel parameters and are built per draw by
/// [`KnotSet::matrices`].
#[derive(Debug, Clone)]
pub struct KnotSet {
    pub knots: Vec<Location>,
}

impl KnotSet {
    pub fn new(knots: Vec<Location>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Invalid("empty knot set".into()));
        }
        Ok(KnotSet { knots })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// `(A, Σ_z)` for the stations of `domain`.
    pub fn matrices(&self, domain: &SpatialDomain, params: &ModelParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let kernel = params.kernel()?;
        let a = cov_matrix(&kernel, domain.metric(), domain.locations(), &self.knots, None)?;
        let sz = cov_matrix(&kernel, domain.metric(), &self.knots, &self.knots, None)?;
        Ok((a, sz))
    }
}

/// Posterior output of a baseline. For GPP and GP2 the `phi` slot of each
/// [`ModelParams`] holds the latent autocorrelation ρ and `latent` holds
/// one state path per retained draw. GP1 has no latent path.
#[derive(Debug, Clone)]
pub struct StateSpaceFit {
    pub kind: BaselineKind,
    pub samples: PosteriorSamples,
    /// `latent[chain][iteration][day]`: knot states (GPP) or station
    /// field values (GP2).
    pub latent: Vec<Vec<Vec<DVector<f64>>>>,
}

impl StateSpaceFit {
    pub fn flat_latent(&self) -> impl Iterator<Item = &Vec<DVector<f64>>> {
        self.latent.iter().flatten()
    }
}

pub fn param_names(kind: BaselineKind, p: usize) -> Vec<String> {
    let mut v = ModelParams::names(p);
    if kind != BaselineKind::Gp1 {
        v[p] = "rho".into();
    }
    v
}

/// One of the comparison models over a fixed station set and design.
pub struct Baseline<'a> {
    pub kind: BaselineKind,
    pub domain: &'a SpatialDomain,
    pub design: &'a DesignTensor,
    knots: Option<KnotSet>,
    dense_ceiling: usize,
}

impl<'a> Baseline<'a> {
    pub fn gpp(domain: &'a SpatialDomain, design: &'a DesignTensor, knots: KnotSet) -> Result<Self> {
        if knots.len() >= domain.len() {
            return Err(Error::Usage(format!(
                "{} knots for {} stations; a predictive process needs fewer knots than stations",
                knots.len(),
                domain.len()
            )));
        }
        Ok(Self::gpp_unchecked(domain, design, knots))
    }

    /// GPP without the knot-count guard, for saturation checks.
    pub fn gpp_unchecked(domain: &'a SpatialDomain, design: &'a DesignTensor, knots: KnotSet) -> Self {
        Baseline {
            kind: BaselineKind::Gpp,
            domain,
            design,
            knots: Some(knots),
            dense_ceiling: DEFAULT_DENSE_CEILING,
        }
    }

    pub fn gp1(domain: &'a SpatialDomain, design: &'a DesignTensor) -> Self {
        Baseline {
            kind: BaselineKind::Gp1,
            domain,
            design,
            knots: None,
            dense_ceiling: DEFAULT_DENSE_CEILING,
        }
    }

    pub fn gp2(domain: &'a SpatialDomain, design: &'a DesignTensor) -> Self {
        Baseline {
            kind: BaselineKind::Gp2,
            ..Self::gp1(domain, design)
        }
    }

    pub fn with_dense_ceiling(mut self, n: usize) -> Self {
        self.dense_ceiling = n;
        self
    }

    pub fn knots(&self) -> Option<&KnotSet> {
        self.knots.as_ref()
    }

    fn check_size(&self) -> Result<()> {
        if self.kind != BaselineKind::Gpp && self.domain.len() > self.dense_ceiling {
            return Err(Error::Usage(format!(
                "{} stations exceed the dense ceiling of {}",
                self.domain.len(),
                self.dense_ceiling
            )));
        }
        Ok(())
    }

    fn dense_model(&self) -> StModel<'a> {
        StModel::new(self.domain, self.design).with_approx(Approximation::Dense)
    }

    /// State space at `params` (GPP or GP2).
    pub fn state_space(&self, params: &ModelParams) -> Result<StateSpace> {
        params.validate()?;
        let (h, q) = match &self.knots {
            Some(k) => {
                let (a, sz) = k.matrices(self.domain, params)?;
                let c = kalman::chol(&sz, "knot covariance")?;
                (c.solve(&a.transpose()).transpose(), sz)
            }
            None => {
                let n = self.domain.len();
                let kernel = params.kernel()?;
                let q = cov_matrix(&kernel, self.domain.metric(), self.domain.locations(), self.domain.locations(), None)?;
                (DMatrix::identity(n, n), q)
            }
        };
        Ok(StateSpace {
            h,
            q,
            rho: params.phi,
            tau2: params.tau2,
        })
    }

    fn residuals(&self, panel: &ResponsePanel, beta: &[f64]) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(panel.n(), panel.days());
        for t in 0..panel.days() {
            let xb = self.design.xb(t, beta);
            for i in 0..panel.n() {
                r[(i, t)] = if panel.is_observed(i, t) { panel.get(i, t) - xb[i] } else { 0.0 };
            }
        }
        r
    }

    fn check_panel(&self, panel: &ResponsePanel) -> Result<()> {
        if panel.n() != self.domain.len() || self.design.n() != self.domain.len() {
            return Err(Error::Dimension(format!(
                "panel has {} stations, design {}, domain {}",
                panel.n(),
                self.design.n(),
                self.domain.len()
            )));
        }
        if panel.days() == 0 || panel.days() > self.design.days() {
            return Err(Error::Dimension("design covers fewer days than the panel".into()));
        }
        Ok(())
    }

    fn filter(&self, panel: &ResponsePanel, params: &ModelParams) -> Result<(StateSpace, FilterOutput)> {
        let ss = self.state_space(params)?;
        let r = self.residuals(panel, &params.beta);
        let f = ss.filter(&r, |i, t| panel.is_observed(i, t))?;
        Ok((ss, f))
    }

    /// Log-likelihood of the observed cells at `params`. For GP1 the panel
    /// must be complete.
    pub fn log_likelihood(&self, panel: &ResponsePanel, params: &ModelParams) -> Result<f64> {
        self.check_size()?;
        self.check_panel(panel)?;
        if self.kind == BaselineKind::Gp1 {
            return self.dense_model().log_marginal(panel, params);
        }
        Ok(self.filter(panel, params)?.1.loglik)
    }

    /// Posterior mean of the response at `site` on an observed day, given
    /// the data and fixed parameters (GPP and GP2).
    pub fn smoothed_site_mean(
        &self,
        panel: &ResponsePanel,
        params: &ModelParams,
        site: &Location,
        x: &[f64],
        day: usize,
    ) -> Result<f64> {
        if self.kind == BaselineKind::Gp1 {
            return Err(Error::Usage("GP1 has no latent state".into()));
        }
        let (ss, f) = self.filter(panel, params)?;
        let (ms, _) = ss.smooth(&f)?;
        let (g, _) = self.site_emission(params, site)?;
        let xb: f64 = x.iter().zip(&params.beta).map(|(a, b)| a * b).sum();
        Ok(xb + g.dot(&ms[day]))
    }

    /// Emission row and independent residual variance at a new location.
    fn site_emission(&self, params: &ModelParams, site: &Location) -> Result<(DVector<f64>, f64)> {
        let kernel = params.kernel()?;
        let metric = self.domain.metric();
        let basis: &[Location] = match &self.knots {
            Some(k) => &k.knots,
            None => self.domain.locations(),
        };
        let q = cov_matrix(&kernel, metric, basis, basis, None)?;
        let c = cov_matrix(&kernel, metric, basis, std::slice::from_ref(site), None)?;
        let g = kalman::chol(&q, "state covariance")?.solve(&c.column(0).into_owned());
        let resid = match self.kind {
            BaselineKind::Gp2 => (params.sigma2 - c.column(0).dot(&g)).max(0.0),
            _ => 0.0,
        };
        Ok((g, resid))
    }

    /// Posterior sampling. Missing cells are integrated out by the filter
    /// (GPP, GP2) or imputed by Gibbs steps (GP1).
    pub fn fit(&self, panel: &ResponsePanel, prior: &PriorSpec, config: &McmcConfig) -> Result<StateSpaceFit> {
        self.check_size()?;
        self.check_panel(panel)?;
        if self.kind == BaselineKind::Gp1 {
            let samples = inference::fit(&self.dense_model(), panel, prior, config)?;
            return Ok(StateSpaceFit {
                kind: self.kind,
                samples,
                latent: Vec::new(),
            });
        }
        config.validate()?;
        prior.validate()?;
        let start = Instant::now();
        let outputs: Vec<Result<ChainOut>> = (0..config.chains)
            .into_par_iter()
            .map(|c| self.run_chain(panel, prior, config, c))
            .collect();
        let mut samples = PosteriorSamples {
            param_names: param_names(self.kind, self.design.p()),
            draws: Vec::with_capacity(config.chains),
            missing_cells: Vec::new(),
            imputed: Vec::with_capacity(config.chains),
            acceptance: Vec::with_capacity(config.chains),
            diagnostics: Vec::new(),
            elapsed_secs: 0.0,
        };
        let mut latent = Vec::with_capacity(config.chains);
        for out in outputs {
            let out = out?;
            samples
                .acceptance
                .push(out.accepted as f64 / (config.iterations * config.thin) as f64);
            samples.imputed.push(vec![Vec::new(); out.draws.len()]);
            samples.draws.push(out.draws);
            latent.push(out.latent);
        }
        samples.compute_diagnostics();
        samples.elapsed_secs = start.elapsed().as_secs_f64();
        Ok(StateSpaceFit {
            kind: self.kind,
            samples,
            latent,
        })
    }

    /// Rebuilds a fit from stored parameter draws by sampling one latent
    /// path per draw (GPP, GP2). Draw `k` uses stream `k + 1` of `seed`.
    pub fn attach_latent(&self, panel: &ResponsePanel, samples: PosteriorSamples, seed: u64) -> Result<StateSpaceFit> {
        self.check_panel(panel)?;
        if self.kind == BaselineKind::Gp1 {
            return Ok(StateSpaceFit {
                kind: self.kind,
                samples,
                latent: Vec::new(),
            });
        }
        let params: Vec<&ModelParams> = samples.flat_draws().collect();
        let paths: Vec<Result<Vec<DVector<f64>>>> = params
            .par_iter()
            .enumerate()
            .map(|(k, p)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64 + 1);
                let (ss, f) = self.filter(panel, p)?;
                ss.ffbs(&f, &mut rng)
            })
            .collect();
        let mut paths = paths.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
        let latent = samples
            .draws
            .iter()
            .map(|c| paths.by_ref().take(c.len()).collect())
            .collect();
        Ok(StateSpaceFit {
            kind: self.kind,
            samples,
            latent,
        })
    }

    fn run_chain(&self, panel: &ResponsePanel, prior: &PriorSpec, config: &McmcConfig, chain: usize) -> Result<ChainOut> {
        let mut rng = chain_rng(config.seed, chain);
        let (beta0, v) = ols_start(&self.dense_model(), panel);
        let (lo, hi) = prior.lengthscale;
        let base = ModelParams {
            beta: beta0,
            phi: 0.5,
            sigma2: 0.7 * v,
            tau2: 0.3 * v,
            lengthscale: (lo * hi).sqrt(),
        };
        let base_u = prior.to_unconstrained(&base);
        let eval = |params: &ModelParams| -> Option<(StateSpace, FilterOutput)> {
            self.filter(panel, params).ok().filter(|(_, f)| f.loglik.is_finite())
        };

        let mut state = None;
        for _ in 0..100 {
            let u: Vec<f64> = base_u
                .iter()
                .map(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (params, log_jac) = prior.from_unconstrained(&u);
            if let Some((ss, f)) = eval(&params) {
                let lp = f.loglik + prior.log_density(&params) + log_jac;
                if lp.is_finite() {
                    state = Some((u, params, ss, f, lp));
                    break;
                }
            }
        }
        let (mut u, mut params, mut ss, mut f, mut lp) = state.ok_or_else(|| {
            Error::Numerical(format!("chain {chain}: no finite log-posterior after 100 initialisations"))
        })?;

        let p = self.design.p();
        let mut initial_sd = vec![0.05; u.len()];
        for (k, sd) in initial_sd.iter_mut().enumerate().take(p) {
            *sd = 0.02 * base.beta[k].abs().max(0.5);
        }
        let mut am = AdaptiveMetropolis::new(&initial_sd, config.warmup, config.adapt_target);
        let mut out = ChainOut {
            draws: Vec::with_capacity(config.iterations),
            latent: Vec::with_capacity(config.iterations),
            accepted: 0,
        };
        for it in 0..config.warmup + config.iterations * config.thin {
            let u_new = am.propose(&u, &mut rng);
            let (p_new, lj_new) = prior.from_unconstrained(&u_new);
            let lprior = prior.log_density(&p_new);
            let mut a = 0.0;
            let mut candidate = None;
            if lprior.is_finite() {
                if let Some((ss_new, f_new)) = eval(&p_new) {
                    let lp_new = f_new.loglik + lprior + lj_new;
                    a = accept_prob(lp, lp_new);
                    candidate = Some((ss_new, f_new, lp_new));
                }
            }
            if rng.random::<f64>() < a {
                let (ss_new, f_new, lp_new) = candidate.expect("accepted proposal was evaluated");
                u = u_new;
                params = p_new;
                ss = ss_new;
                f = f_new;
                lp = lp_new;
                if it >= config.warmup {
                    out.accepted += 1;
                }
            }
            am.adapt(it, &u, a);
            if it >= config.warmup && (it + 1 - config.warmup) % config.thin == 0 {
                out.latent.push(ss.ffbs(&f, &mut rng)?);
                out.draws.push(params.clone());
            }
        }
        Ok(out)
    }

    /// Predictive draws for every station over the forecast days and every
    /// new site over all days, in the same layout as [`Predictor::run`].
    pub fn predict(
        &self,
        fit: &StateSpaceFit,
        panel: &ResponsePanel,
        req: &PredictionRequest,
        seed: u64,
    ) -> Result<Predictions> {
        if fit.kind != self.kind {
            return Err(Error::Usage(format!(
                "a {} fit cannot drive {} predictions",
                fit.kind.as_str(),
                self.kind.as_str()
            )));
        }
        if self.kind == BaselineKind::Gp1 {
            return Predictor::new(self.dense_model(), &fit.samples, panel)
                .with_neighbors(self.domain.len())
                .with_seed(seed)
                .run(req);
        }
        self.check_request(panel, req)?;
        let params: Vec<&ModelParams> = fit.samples.flat_draws().collect();
        let paths: Vec<&Vec<DVector<f64>>> = fit.flat_latent().collect();
        if params.is_empty() || params.len() != paths.len() {
            return Err(Error::Invalid("fit has no usable draws".into()));
        }
        let sims: Vec<Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> = params
            .par_iter()
            .zip(paths.par_iter())
            .enumerate()
            .map(|(k, (p, z))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64 + 1);
                self.simulate(p, z, panel.days(), req, &mut rng)
            })
            .collect();
        let sims = sims.into_iter().collect::<Result<Vec<_>>>()?;
        let t_obs = panel.days();
        let mut out = Predictions::default();
        for h in 0..req.horizon {
            for (i, loc) in self.domain.locations().iter().enumerate() {
                out.targets.push(TargetPrediction {
                    station_id: loc.id.clone(),
                    day: t_obs + h,
                    new_location: false,
                    draws: PredictiveDraws::from_samples(sims.iter().map(|s| s.0[h][i]).collect()),
                    scale: Scale::Relative,
                });
            }
        }
        for (j, site) in req.new_sites.iter().enumerate() {
            for t in 0..t_obs + req.horizon {
                out.targets.push(TargetPrediction {
                    station_id: site.location.id.clone(),
                    day: t,
                    new_location: true,
                    draws: PredictiveDraws::from_samples(sims.iter().map(|s| s.1[j][t]).collect()),
                    scale: Scale::Relative,
                });
            }
        }
        Ok(out)
    }

    fn check_request(&self, panel: &ResponsePanel, req: &PredictionRequest) -> Result<()> {
        self.check_panel(panel)?;
        let (n, p, t_obs) = (self.domain.len(), self.design.p(), panel.days());
        if req.horizon > 0 {
            let fd = req
                .future_design
                .as_ref()
                .ok_or_else(|| Error::Invalid("forecasting needs future covariates".into()))?;
            if fd.n() != n || fd.p() != p || fd.days() < req.horizon {
                return Err(Error::Dimension("future design does not cover the horizon".into()));
            }
        }
        for site in &req.new_sites {
            let x = &site.covariates;
            if x.ncols() != p || x.nrows() < t_obs + req.horizon {
                return Err(Error::Invalid(format!(
                    "site `{}` needs covariates for {} days",
                    site.location.id,
                    t_obs + req.horizon
                )));
            }
        }
        Ok(())
    }

    /// One predictive trajectory: future station values (`horizon × n`)
    /// and per-site values over all days.
    #[allow(clippy::type_complexity)]
    fn simulate<R: Rng>(
        &self,
        params: &ModelParams,
        z: &[DVector<f64>],
        t_obs: usize,
        req: &PredictionRequest,
        rng: &mut R,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let ss = self.state_space(params)?;
        let k = ss.k();
        let lq = kalman::chol(&ss.q, "state innovation covariance")?.l();
        let tau = params.tau2.sqrt();
        let rho = params.phi;
        let normal = |rng: &mut R| rng.sample::<f64, _>(StandardNormal);

        let mut states: Vec<DVector<f64>> = z.to_vec();
        for _ in 0..req.horizon {
            let xi = DVector::from_fn(k, |_, _| normal(rng));
            let next = states.last().expect("at least one observed day") * rho + &lq * xi;
            states.push(next);
        }

        let mut stations = Vec::with_capacity(req.horizon);
        if let Some(fd) = &req.future_design {
            for h in 0..req.horizon {
                let xb = fd.xb(h, &params.beta);
                let w = &ss.h * &states[t_obs + h];
                stations.push((0..self.domain.len()).map(|i| xb[i] + w[i] + tau * normal(rng)).collect());
            }
        }

        let mut sites = Vec::with_capacity(req.new_sites.len());
        for site in &req.new_sites {
            let (g, rv) = self.site_emission(params, &site.location)?;
            let mut u = (rv / (1.0 - rho * rho)).sqrt() * normal(rng);
            let mut vals = Vec::with_capacity(t_obs + req.horizon);
            for (t, state) in states.iter().enumerate().take(t_obs + req.horizon) {
                if t > 0 {
                    u = rho * u + rv.sqrt() * normal(rng);
                }
                let xb: f64 = site.covariates.row(t).iter().zip(&params.beta).map(|(a, b)| a * b).sum();
                vals.push(xb + g.dot(state) + u + tau * normal(rng));
            }
            sites.push(vals);
        }
        Ok((stations, sites))
    }
}

struct ChainOut {
    draws: Vec<ModelParams>,
    latent: Vec<Vec<DVector<f64>>>,
    accepted: usize,
}

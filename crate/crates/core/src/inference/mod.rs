//! Posterior sampling for the spatiotemporal model.
//!
//! Each iteration does one adaptive random-walk Metropolis update of the
//! transformed parameter vector against the marginal log-posterior, then a
//! Gibbs sweep over the missing responses drawn from their exact full
//! conditionals. Chains are independent and seeded individually.

pub mod diagnostics;
pub mod sampler;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::law::SpatialLaw;
use crate::stmodel::{ModelParams, PriorSpec, ResponsePanel, StModel};

pub use diagnostics::{diagnose, ParamDiagnostic};
use sampler::{accept_prob, AdaptiveMetropolis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    /// Retained draws per chain.
    pub iterations: usize,
    pub warmup: usize,
    /// Sampler iterations per retained draw.
    pub thin: usize,
    pub seed: u64,
    pub adapt_target: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            iterations: 500,
            warmup: 500,
            thin: 1,
            seed: 1,
            adapt_target: 0.3,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.iterations == 0 || self.warmup == 0 || self.thin == 0 {
            return Err(Error::Config("chains, iterations, warmup and thin must all be >= 1".into()));
        }
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(Error::Config("adapt_target must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Retained MCMC output.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub param_names: Vec<String>,
    /// `draws[chain][iteration]`.
    pub draws: Vec<Vec<ModelParams>>,
    /// Missing `(station, day)` cells, in the order used by `imputed`.
    pub missing_cells: Vec<(usize, usize)>,
    /// `imputed[chain][iteration][cell]`.
    pub imputed: Vec<Vec<Vec<f64>>>,
    pub acceptance: Vec<f64>,
    pub diagnostics: Vec<ParamDiagnostic>,
    /// Wall-clock seconds including warmup.
    pub elapsed_secs: f64,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.draws.iter().map(|c| c.len()).sum()
    }

    /// All draws, chain-major.
    pub fn flat_draws(&self) -> impl Iterator<Item = &ModelParams> {
        self.draws.iter().flatten()
    }

    /// Imputed vectors aligned with [`PosteriorSamples::flat_draws`].
    pub fn flat_imputed(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.imputed.iter().flatten()
    }

    /// Trace of one parameter per chain, by index into `param_names`.
    pub fn trace(&self, k: usize) -> Vec<Vec<f64>> {
        self.draws
            .iter()
            .map(|c| c.iter().map(|p| p.to_vec()[k]).collect())
            .collect()
    }

    pub fn posterior_mean(&self) -> Vec<f64> {
        let n = self.n_draws() as f64;
        let mut acc = vec![0.0; self.param_names.len()];
        for p in self.flat_draws() {
            for (a, v) in acc.iter_mut().zip(p.to_vec()) {
                *a += v / n;
            }
        }
        acc
    }

    /// `panel` with missing cells filled from flat draw `k`.
    pub fn completed_panel(&self, panel: &ResponsePanel, k: usize) -> ResponsePanel {
        let mut out = panel.clone();
        if let Some(vals) = self.flat_imputed().nth(k) {
            for (&(i, t), &v) in self.missing_cells.iter().zip(vals) {
                out.fill(i, t, v);
            }
        }
        out
    }

    pub(crate) fn compute_diagnostics(&mut self) {
        self.diagnostics = (0..self.param_names.len())
            .map(|k| diagnose(&self.param_names[k], &self.trace(k)))
            .collect();
    }
}

/// Draws every missing cell in turn from its full conditional given all
/// other current values. Returns the filled panel.
pub fn impute_step<R: Rng + ?Sized>(
    model: &StModel,
    panel: &ResponsePanel,
    params: &ModelParams,
    rng: &mut R,
) -> Result<ResponsePanel> {
    let mut out = panel.clone();
    if panel.n_missing() == 0 {
        return Ok(out);
    }
    let law = model.response_law(params)?;
    let mut r = model.innovations(&out, params);
    let mut cells = out.missing_cells();
    cells.shuffle(rng);
    gibbs_sweep(model, law.as_ref(), &mut out, &mut r, params, &cells, rng);
    Ok(out)
}

fn gibbs_sweep<R: Rng + ?Sized>(
    model: &StModel,
    law: &dyn SpatialLaw,
    panel: &mut ResponsePanel,
    r: &mut DMatrix<f64>,
    params: &ModelParams,
    cells: &[(usize, usize)],
    rng: &mut R,
) {
    let days = panel.days();
    for &(s, t) in cells {
        let cur = panel.get(s, t);
        let (mean, var) = model.cell_conditional(law, r, params, s, t, cur);
        let z: f64 = rng.sample(StandardNormal);
        let new = mean + var.sqrt() * z;
        let delta = new - cur;
        panel.fill(s, t, new);
        r[(s, t)] += delta;
        if t + 1 < days {
            r[(s, t + 1)] -= params.phi * delta;
        }
    }
}

/// Ordinary least squares of observed responses on the design.
pub(crate) fn ols_start(model: &StModel, panel: &ResponsePanel) -> (Vec<f64>, f64) {
    let p = model.design.p();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut rows = Vec::new();
    for t in 0..panel.days() {
        let xt = model.design.day(t);
        for i in 0..panel.n() {
            if let Some(y) = panel.observed_value(i, t) {
                let x: Vec<f64> = xt.row(i).iter().copied().collect();
                for a in 0..p {
                    xty[a] += x[a] * y;
                    for b in 0..p {
                        xtx[(a, b)] += x[a] * x[b];
                    }
                }
                rows.push((x, y));
            }
        }
    }
    for a in 0..p {
        xtx[(a, a)] += 1e-8;
    }
    let beta: Vec<f64> = match xtx.cholesky() {
        Some(ch) if rows.len() > p => ch.solve(&xty).iter().copied().collect(),
        _ => vec![0.0; p],
    };
    if rows.len() < 2 {
        return (beta, 1.0);
    }
    let resid: Vec<f64> = rows
        .iter()
        .map(|(x, y)| y - x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let m = resid.iter().sum::<f64>() / resid.len() as f64;
    let v = resid.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
    (beta, v.max(1e-6))
}

struct ChainOutput {
    draws: Vec<ModelParams>,
    imputed: Vec<Vec<f64>>,
    accepted: usize,
}

/// Runs all chains and computes diagnostics.
pub fn fit(model: &StModel, panel: &ResponsePanel, prior: &PriorSpec, config: &McmcConfig) -> Result<PosteriorSamples> {
    config.validate()?;
    prior.validate()?;
    if panel.n() != model.domain.len() {
        return Err(Error::Dimension(format!(
            "panel has {} stations, domain {}",
            panel.n(),
            model.domain.len()
        )));
    }
    if panel.days() > model.design.days() {
        return Err(Error::Dimension("design covers fewer days than the panel".into()));
    }
    let all_missing = panel.n_missing() == panel.n() * panel.days();
    if !all_missing {
        if let Some(i) = (0..panel.n()).find(|&i| panel.n_observed_in_row(i) == 0) {
            return Err(Error::Invalid(format!(
                "station `{}` has no observed values",
                model.domain.locations()[i].id
            )));
        }
    }
    let start = Instant::now();
    let outputs: Vec<Result<ChainOutput>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(model, panel, prior, config, c))
        .collect();
    let mut samples = PosteriorSamples {
        param_names: ModelParams::names(model.design.p()),
        draws: Vec::with_capacity(config.chains),
        missing_cells: panel.missing_cells(),
        imputed: Vec::with_capacity(config.chains),
        acceptance: Vec::with_capacity(config.chains),
        diagnostics: Vec::new(),
        elapsed_secs: 0.0,
    };
    for out in outputs {
        let out = out?;
        samples.acceptance.push(out.accepted as f64 / (config.iterations * config.thin) as f64);
        samples.draws.push(out.draws);
        samples.imputed.push(out.imputed);
    }
    samples.compute_diagnostics();
    samples.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(samples)
}

pub(crate) fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn run_chain(
    model: &StModel,
    panel: &ResponsePanel,
    prior: &PriorSpec,
    config: &McmcConfig,
    chain: usize,
) -> Result<ChainOutput> {
    let mut rng = chain_rng(config.seed, chain);
    let (beta0, v) = ols_start(model, panel);
    let (lo, hi) = prior.lengthscale;
    let base = ModelParams {
        beta: beta0,
        phi: 0.5,
        sigma2: 0.7 * v,
        tau2: 0.3 * v,
        lengthscale: (lo * hi).sqrt(),
    };
    let base_u = prior.to_unconstrained(&base);
    let dim = base_u.len();

    let mut filled = panel.clone();
    let mut state = None;
    for _attempt in 0..100 {
        let u: Vec<f64> = base_u
            .iter()
            .map(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (params, log_jac) = prior.from_unconstrained(&u);
        for &(i, t) in &panel.missing_cells() {
            let xb: f64 = model.design.row(i, t).iter().zip(&params.beta).map(|(a, b)| a * b).sum();
            filled.fill(i, t, xb);
        }
        let law = match model.response_law(&params) {
            Ok(l) => l,
            Err(_) => continue,
        };
        let r = model.innovations(&filled, &params);
        let lp = model.log_marginal_with(law.as_ref(), &r, params.phi) + prior.log_density(&params) + log_jac;
        if lp.is_finite() {
            state = Some((u, params, law, r, lp));
            break;
        }
    }
    let (mut u, mut params, mut law, mut r, mut lp) = state.ok_or_else(|| {
        Error::Numerical(format!("chain {chain}: no finite log-posterior after 100 initialisations"))
    })?;

    let mut initial_sd = vec![0.05; dim];
    let p = model.design.p();
    for (k, sd) in initial_sd.iter_mut().enumerate().take(p) {
        *sd = 0.02 * base.beta[k].abs().max(0.5);
    }
    let mut am = AdaptiveMetropolis::new(&initial_sd, config.warmup, config.adapt_target);
    let missing = panel.missing_cells();
    let total = config.warmup + config.iterations * config.thin;
    let mut out = ChainOutput {
        draws: Vec::with_capacity(config.iterations),
        imputed: Vec::with_capacity(config.iterations),
        accepted: 0,
    };
    let mut cells = missing.clone();
    for it in 0..total {
        // parameter block
        let u_new = am.propose(&u, &mut rng);
        let (p_new, lj_new) = prior.from_unconstrained(&u_new);
        let lprior = prior.log_density(&p_new);
        let mut a = 0.0;
        let mut candidate = None;
        if lprior.is_finite() {
            if let Ok(law_new) = model.response_law(&p_new) {
                model.innovations_into(&filled, &p_new, &mut r);
                let lp_new = model.log_marginal_with(law_new.as_ref(), &r, p_new.phi) + lprior + lj_new;
                a = accept_prob(lp, lp_new);
                candidate = Some((law_new, lp_new));
            }
        }
        let coin: f64 = rng.random();
        if coin < a {
            let (law_new, lp_new) = candidate.expect("accepted proposal has a law");
            u = u_new;
            params = p_new;
            law = law_new;
            lp = lp_new;
            if it >= config.warmup {
                out.accepted += 1;
            }
        }
        am.adapt(it, &u, a);

        // missing-data block
        if !cells.is_empty() {
            // the buffer may hold a rejected proposal's innovations
            model.innovations_into(&filled, &params, &mut r);
            cells.shuffle(&mut rng);
            gibbs_sweep(model, law.as_ref(), &mut filled, &mut r, &params, &cells, &mut rng);
            let (_, log_jac) = prior.from_unconstrained(&u);
            lp = model.log_marginal_with(law.as_ref(), &r, params.phi) + prior.log_density(&params) + log_jac;
        }

        if it >= config.warmup && (it + 1 - config.warmup) % config.thin == 0 {
            out.draws.push(params.clone());
            out.imputed.push(missing.iter().map(|&(i, t)| filled.get(i, t)).collect());
        }
    }
    Ok(out)
}

//! Posterior-predictive simulation at stations and new locations, in the
//! past and beyond the last observed day.
//!
//! Every posterior draw (with its imputed panel) yields one predictive
//! trajectory per target. Past values at a new location are simulated day
//! by day by kriging its innovation from the neighboring station
//! innovations under the response-mode covariance. Future values advance
//! the observed stations with fresh latent fields and noise and krige the
//! latent field to new locations, so all targets stay jointly consistent.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::PosteriorSamples;
use crate::nngp::{krige_weights, FactorMode, KrigingLaw, COINCIDENT_TOL};
use crate::spatial::Location;
use crate::stmodel::{DesignTensor, ModelParams, ResponsePanel, StModel};

/// Probabilities of the stored quantiles.
pub const QUANTILE_PROBS: [f64; 4] = [0.025, 0.05, 0.95, 0.975];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q2_5: f64,
    pub q5: f64,
    pub q95: f64,
    pub q97_5: f64,
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Predictive samples for one target with their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    pub samples: Vec<f64>,
    pub summary: Summary,
}

impl PredictiveDraws {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let q = |p| quantile_sorted(&sorted, p);
        let summary = Summary {
            mean,
            median: q(0.5),
            q2_5: q(0.025),
            q5: q(0.05),
            q95: q(0.95),
            q97_5: q(0.975),
        };
        PredictiveDraws { samples, summary }
    }

    pub fn variance(&self) -> f64 {
        let n = self.samples.len() as f64;
        let m = self.summary.mean;
        self.samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    /// Central interval at level 0.9 or 0.95.
    pub fn interval(&self, level: f64) -> Result<(f64, f64)> {
        let s = &self.summary;
        if (level - 0.95).abs() < 1e-12 {
            Ok((s.q2_5, s.q97_5))
        } else if (level - 0.9).abs() < 1e-12 {
            Ok((s.q5, s.q95))
        } else {
            Err(Error::Invalid(format!("no stored interval at level {level}")))
        }
    }

    /// Adds `c` to every sample and summary statistic.
    pub fn shifted(&self, c: f64) -> Self {
        let s = &self.summary;
        PredictiveDraws {
            samples: self.samples.iter().map(|v| v + c).collect(),
            summary: Summary {
                mean: s.mean + c,
                median: s.median + c,
                q2_5: s.q2_5 + c,
                q5: s.q5 + c,
                q95: s.q95 + c,
                q97_5: s.q97_5 + c,
            },
        }
    }
}

/// Adds a station mean back to centered predictions.
pub fn back_transform(draws: &PredictiveDraws, station_mean: f64) -> PredictiveDraws {
    draws.shifted(station_mean)
}

/// A location outside the fitted domain with its covariates.
#[derive(Debug, Clone)]
pub struct NewSite {
    pub location: Location,
    /// One row per day from the first modelled day, `p` columns.
    pub covariates: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictionRequest {
    pub new_sites: Vec<NewSite>,
    /// Days beyond the last observed day.
    pub horizon: usize,
    /// Station covariates for the forecast days (`horizon` days, model order).
    pub future_design: Option<DesignTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Relative,
    Original,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Relative => "relative",
            Scale::Original => "original",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetPrediction {
    pub station_id: String,
    pub day: usize,
    pub new_location: bool,
    pub draws: PredictiveDraws,
    pub scale: Scale,
}

#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub targets: Vec<TargetPrediction>,
}

impl Predictions {
    pub fn get(&self, station_id: &str, day: usize) -> Option<&TargetPrediction> {
        self.targets.iter().find(|t| t.station_id == station_id && t.day == day)
    }

    /// Adds known station means; targets without one stay on the relative
    /// scale and are reported.
    pub fn back_transform(&mut self, means: &HashMap<String, f64>) {
        let mut unknown = Vec::new();
        for t in &mut self.targets {
            if t.scale == Scale::Original {
                continue;
            }
            match means.get(&t.station_id) {
                Some(&m) => {
                    t.draws = back_transform(&t.draws, m);
                    t.scale = Scale::Original;
                }
                None => {
                    if !unknown.contains(&t.station_id) {
                        unknown.push(t.station_id.clone());
                    }
                }
            }
        }
        if !unknown.is_empty() {
            log::warn!(
                "no station mean for {}; left on the relative scale",
                unknown.join(", ")
            );
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "station_id,day,mean,median,q2.5,q5,q95,q97.5,scale")?;
            for t in &self.targets {
                let s = &t.draws.summary;
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    t.station_id,
                    t.day,
                    s.mean,
                    s.median,
                    s.q2_5,
                    s.q5,
                    s.q95,
                    s.q97_5,
                    t.scale.as_str()
                )?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Per-draw simulation output.
struct DrawPath {
    /// `horizon × n` future station values.
    stations: Vec<Vec<f64>>,
    /// Per site, values for days `0..T + horizon`.
    sites: Vec<Vec<f64>>,
}

/// Simulates predictive trajectories from a fitted model.
pub struct Predictor<'a> {
    model: StModel<'a>,
    samples: &'a PosteriorSamples,
    panel: &'a ResponsePanel,
    neighbors: usize,
    seed: u64,
}

impl<'a> Predictor<'a> {
    pub fn new(model: StModel<'a>, samples: &'a PosteriorSamples, panel: &'a ResponsePanel) -> Self {
        Predictor {
            model,
            samples,
            panel,
            neighbors: model.domain.m(),
            seed: 0,
        }
    }

    /// Number of stations used to krige a new location.
    pub fn with_neighbors(mut self, k: usize) -> Self {
        self.neighbors = k.max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn days(&self) -> usize {
        self.panel.days()
    }

    fn check(&self, req: &PredictionRequest) -> Result<()> {
        let n = self.model.domain.len();
        let p = self.model.design.p();
        let t_obs = self.days();
        if self.panel.n() != n {
            return Err(Error::Dimension("panel and domain disagree on station count".into()));
        }
        if self.samples.n_draws() == 0 {
            return Err(Error::Invalid("no posterior draws".into()));
        }
        if req.horizon > 0 {
            let fd = req
                .future_design
                .as_ref()
                .ok_or_else(|| Error::Invalid("forecasting needs future covariates".into()))?;
            if fd.n() != n || fd.p() != p || fd.days() < req.horizon {
                return Err(Error::Dimension(format!(
                    "future design is {}×{} over {} days; need {n}×{p} over {}",
                    fd.n(),
                    fd.p(),
                    fd.days(),
                    req.horizon
                )));
            }
        }
        for site in &req.new_sites {
            let x = &site.covariates;
            if x.ncols() != p || x.nrows() < t_obs + req.horizon {
                return Err(Error::Invalid(format!(
                    "site `{}` needs covariates for {} days with {p} columns, got {}×{}",
                    site.location.id,
                    t_obs + req.horizon,
                    x.nrows(),
                    x.ncols()
                )));
            }
            if x.rows(0, t_obs + req.horizon).iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "site `{}` has missing covariates",
                    site.location.id
                )));
            }
        }
        Ok(())
    }

    /// Predictive draws for every station over the forecast days and for
    /// every new site over all days.
    pub fn run(&self, req: &PredictionRequest) -> Result<Predictions> {
        self.check(req)?;
        let params: Vec<&ModelParams> = self.samples.flat_draws().collect();
        let paths: Vec<Result<DrawPath>> = params
            .par_iter()
            .enumerate()
            .map(|(k, p)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(k as u64 + 1);
                let filled = self.samples.completed_panel(self.panel, k);
                self.simulate(p, &filled, req, &mut rng)
            })
            .collect();
        let paths = paths.into_iter().collect::<Result<Vec<_>>>()?;
        let t_obs = self.days();
        let locs = self.model.domain.locations();
        let mut out = Predictions::default();
        for h in 0..req.horizon {
            for (i, loc) in locs.iter().enumerate() {
                let samples = paths.iter().map(|p| p.stations[h][i]).collect();
                out.targets.push(TargetPrediction {
                    station_id: loc.id.clone(),
                    day: t_obs + h,
                    new_location: false,
                    draws: PredictiveDraws::from_samples(samples),
                    scale: Scale::Relative,
                });
            }
        }
        for (j, site) in req.new_sites.iter().enumerate() {
            for t in 0..t_obs + req.horizon {
                let samples = paths.iter().map(|p| p.sites[j][t]).collect();
                out.targets.push(TargetPrediction {
                    station_id: site.location.id.clone(),
                    day: t,
                    new_location: true,
                    draws: PredictiveDraws::from_samples(samples),
                    scale: Scale::Relative,
                });
            }
        }
        Ok(out)
    }

    /// Draws at a new location on an observed day (`day < T`).
    pub fn predict_new_location_past(&self, site: &NewSite, day: usize) -> Result<PredictiveDraws> {
        if day >= self.days() {
            return Err(Error::Invalid(format!("day {day} is not an observed day")));
        }
        let req = PredictionRequest {
            new_sites: vec![site.clone()],
            horizon: 0,
            future_design: None,
        };
        self.pick(&req, &site.location.id, day)
    }

    /// Draws at a new location beyond the last observed day.
    pub fn predict_new_location_future(
        &self,
        site: &NewSite,
        day: usize,
        future_design: &DesignTensor,
    ) -> Result<PredictiveDraws> {
        let horizon = self.future_horizon(day)?;
        let req = PredictionRequest {
            new_sites: vec![site.clone()],
            horizon,
            future_design: Some(future_design.clone()),
        };
        self.pick(&req, &site.location.id, day)
    }

    /// Draws at a fitted station beyond the last observed day.
    pub fn predict_observed_future(
        &self,
        station: usize,
        day: usize,
        future_design: &DesignTensor,
    ) -> Result<PredictiveDraws> {
        let horizon = self.future_horizon(day)?;
        let id = &self
            .model
            .domain
            .locations()
            .get(station)
            .ok_or_else(|| Error::Invalid(format!("no station at index {station}")))?
            .id;
        let req = PredictionRequest {
            new_sites: Vec::new(),
            horizon,
            future_design: Some(future_design.clone()),
        };
        self.pick(&req, id, day)
    }

    fn future_horizon(&self, day: usize) -> Result<usize> {
        if day < self.days() {
            return Err(Error::Invalid(format!("day {day} is not beyond the observed period")));
        }
        Ok(day - self.days() + 1)
    }

    fn pick(&self, req: &PredictionRequest, id: &str, day: usize) -> Result<PredictiveDraws> {
        let out = self.run(req)?;
        out.get(id, day)
            .map(|t| t.draws.clone())
            .ok_or_else(|| Error::Invalid(format!("no prediction for `{id}` on day {day}")))
    }

    /// Index of a station coinciding with `loc`, if any.
    fn coincident(&self, loc: &Location) -> Option<usize> {
        let near = self.model.domain.nearest(loc, 1);
        near.first().filter(|(_, d)| *d < COINCIDENT_TOL).map(|&(j, _)| j)
    }

    fn site_laws(&self, params: &ModelParams, loc: &Location) -> Result<(KrigingLaw, KrigingLaw)> {
        let kernel = params.kernel()?;
        let resp = krige_weights(
            self.model.domain,
            loc,
            &kernel,
            FactorMode::Response(params.nugget()?),
            self.neighbors,
        )?;
        let lat = krige_weights(self.model.domain, loc, &kernel, FactorMode::Latent, self.neighbors)?;
        Ok((resp, lat))
    }

    fn simulate(
        &self,
        params: &ModelParams,
        filled: &ResponsePanel,
        req: &PredictionRequest,
        rng: &mut ChaCha8Rng,
    ) -> Result<DrawPath> {
        let n = self.model.domain.len();
        let t_obs = self.days();
        let r = self.model.innovations(filled, params);
        let scale0 = self.model.init.variance_scale(params.phi);

        // residuals e_t = y_t - X_t β along each trajectory
        let mut site_e: Vec<Vec<f64>> = Vec::with_capacity(req.new_sites.len());
        let mut site_y: Vec<Vec<f64>> = Vec::with_capacity(req.new_sites.len());
        let mut site_lat: Vec<Option<KrigingLaw>> = Vec::with_capacity(req.new_sites.len());
        let mut site_twin: Vec<Option<usize>> = Vec::with_capacity(req.new_sites.len());
        for site in &req.new_sites {
            let total = t_obs + req.horizon;
            let twin = self.coincident(&site.location);
            site_twin.push(twin);
            let mut e = vec![0.0; total];
            let mut y = vec![0.0; total];
            if let Some(j) = twin {
                for t in 0..t_obs {
                    y[t] = filled.get(j, t);
                    e[t] = y[t] - xb_row(&site.covariates, t, &params.beta);
                }
                site_lat.push(None);
            } else {
                let (resp, lat) = self.site_laws(params, &site.location)?;
                for t in 0..t_obs {
                    let scale = if t == 0 { scale0 } else { 1.0 };
                    let mean_r: f64 = resp.neighbors.iter().zip(&resp.weights).map(|(&j, w)| w * r[(j, t)]).sum();
                    let z: f64 = rng.sample(StandardNormal);
                    let innov = mean_r + (resp.variance * scale).sqrt() * z;
                    e[t] = if t == 0 { innov } else { params.phi * e[t - 1] + innov };
                    y[t] = xb_row(&site.covariates, t, &params.beta) + e[t];
                }
                site_lat.push(Some(lat));
            }
            site_e.push(e);
            site_y.push(y);
        }

        let mut stations = Vec::with_capacity(req.horizon);
        if req.horizon > 0 {
            let fd = req.future_design.as_ref().expect("checked");
            let law = self.model.latent_law(params)?;
            let tau = params.tau2.sqrt();
            let mut e_prev: Vec<f64> = {
                let xb = self.model.design.xb(t_obs - 1, &params.beta);
                (0..n).map(|i| filled.get(i, t_obs - 1) - xb[i]).collect()
            };
            for h in 0..req.horizon {
                let w = law.sample_residual(rng);
                let xb = fd.xb(h, &params.beta);
                let mut y_h = vec![0.0; n];
                for i in 0..n {
                    let eps: f64 = rng.sample::<f64, _>(StandardNormal) * tau;
                    e_prev[i] = params.phi * e_prev[i] + w[i] + eps;
                    y_h[i] = xb[i] + e_prev[i];
                }
                let t = t_obs + h;
                for (k, site) in req.new_sites.iter().enumerate() {
                    let x_t = xb_row(&site.covariates, t, &params.beta);
                    if let Some(j) = site_twin[k] {
                        site_y[k][t] = y_h[j];
                        site_e[k][t] = y_h[j] - x_t;
                        continue;
                    }
                    let lat = site_lat[k].as_ref().expect("non-coincident site");
                    let w_mean: f64 = lat.neighbors.iter().zip(&lat.weights).map(|(&j, a)| a * w[j]).sum();
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    let w0 = w_mean + lat.variance.sqrt() * z1;
                    site_e[k][t] = params.phi * site_e[k][t - 1] + w0 + tau * z2;
                    site_y[k][t] = x_t + site_e[k][t];
                }
                stations.push(y_h);
            }
        }
        Ok(DrawPath {
            stations,
            sites: site_y,
        })
    }

    /// Exact per-draw predictive `(mean, variance)` of one target, marginal
    /// over the simulation randomness. Flat draw `k` selects parameters and
    /// the imputed panel.
    pub fn draw_law(&self, k: usize, target: LawTarget<'_>, day: usize) -> Result<(f64, f64)> {
        let params = self
            .samples
            .flat_draws()
            .nth(k)
            .ok_or_else(|| Error::Invalid(format!("no draw {k}")))?;
        let filled = self.samples.completed_panel(self.panel, k);
        let t_obs = self.days();
        let phi = params.phi;
        match target {
            LawTarget::Station { index, future_design } => {
                if day < t_obs {
                    return Ok((filled.get(index, day), 0.0));
                }
                let law = self.model.latent_law(params)?;
                let cov = law.covariance();
                let step_var = cov[(index, index)] + params.tau2;
                let e_last = filled.get(index, t_obs - 1) - self.model.design.xb(t_obs - 1, &params.beta)[index];
                let h = day - t_obs + 1;
                let mean = future_design.xb(h - 1, &params.beta)[index] + phi.powi(h as i32) * e_last;
                Ok((mean, step_var * geometric(phi * phi, h)))
            }
            LawTarget::Site(site) => {
                let (resp, lat) = self.site_laws(params, &site.location)?;
                let r = self.model.innovations(&filled, params);
                let scale0 = self.model.init.variance_scale(phi);
                let last = day.min(t_obs - 1);
                let mut m = 0.0;
                let mut v = 0.0;
                for t in 0..=last {
                    let scale = if t == 0 { scale0 } else { 1.0 };
                    let a: f64 = resp.neighbors.iter().zip(&resp.weights).map(|(&j, w)| w * r[(j, t)]).sum();
                    m = phi * m + a;
                    v = phi * phi * v + resp.variance * scale;
                }
                if day >= t_obs {
                    let law = self.model.latent_law(params)?;
                    let cov = law.covariance();
                    let mut wcw = 0.0;
                    for (x, &i) in lat.weights.iter().zip(&lat.neighbors) {
                        for (y, &j) in lat.weights.iter().zip(&lat.neighbors) {
                            wcw += x * y * cov[(i, j)];
                        }
                    }
                    let step_var = wcw + lat.variance + params.tau2;
                    let h = day - t_obs + 1;
                    m *= phi.powi(h as i32);
                    v = phi.powi(2 * h as i32) * v + step_var * geometric(phi * phi, h);
                }
                Ok((xb_row(&site.covariates, day, &params.beta) + m, v))
            }
        }
    }
}

/// Target selector for [`Predictor::draw_law`].
#[derive(Debug, Clone, Copy)]
pub enum LawTarget<'r> {
    Station {
        index: usize,
        future_design: &'r DesignTensor,
    },
    Site(&'r NewSite),
}

/// `1 + q + … + q^(h-1)`.
fn geometric(q: f64, h: usize) -> f64 {
    (0..h).map(|k| q.powi(k as i32)).sum()
}

fn xb_row(x: &DMatrix<f64>, t: usize, beta: &[f64]) -> f64 {
    (0..x.ncols()).map(|j| x[(t, j)] * beta[j]).sum()
}

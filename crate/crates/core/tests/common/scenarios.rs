//! Dense oracle for the three prediction scenarios: the joint Gaussian of
//! every station plus one new site over training and forecast days.

use nalgebra::DMatrix;
use rand::Rng;
use stnngp::predict::{LawTarget, NewSite, Predictor};
use stnngp::spatial::{Location, SpatialDomain};
use stnngp::stmodel::{DesignTensor, InitialLaw, ModelParams, ResponsePanel, StModel};

use super::*;

pub const HORIZON: usize = 2;

pub struct Case {
    pub domain: SpatialDomain,
    pub design: DesignTensor,
    pub future: DesignTensor,
    pub panel: ResponsePanel,
    pub site: NewSite,
    pub draws: Vec<ModelParams>,
    pub imputed: Vec<Vec<f64>>,
}

pub fn case(seed: u64, n: usize, days: usize) -> Case {
    let mut r = rng(seed);
    let domain = full_domain(uniform_sites(&mut r, n, "s"));
    let all = toy_design(&mut r, n, days + HORIZON);
    let design = all.truncate(days);
    let future = all.slice_days(days, days + HORIZON);
    let missing = [(1, 0), (n - 2, days - 1), (0, 2)];
    let panel = toy_panel(&mut r, n, days, &missing);
    let site = NewSite {
        location: Location::planar("new", r.random(), r.random()).unwrap(),
        covariates: DMatrix::from_fn(days + HORIZON, 2, |_, j| if j == 0 { 1.0 } else { r.random::<f64>() - 0.5 }),
    };
    let draws: Vec<ModelParams> = (0..3).map(|_| random_params(&mut r)).collect();
    let imputed = (0..3).map(|_| (0..missing.len()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).collect();
    Case { domain, design, future, panel, site, draws, imputed }
}

/// Dense joint over stations plus the new site for all days, conditioned on
/// every station value of the completed panel.
struct Oracle {
    joint: DMatrix<f64>,
    obs: Vec<usize>,
    vals: Vec<f64>,
    n: usize,
}

impl Oracle {
    fn new(c: &Case, p: &ModelParams, filled: &ResponsePanel, init: InitialLaw) -> Self {
        let n = c.domain.len();
        let days = filled.days();
        let mut locs = c.domain.locations().to_vec();
        locs.push(c.site.location.clone());
        let sigma = response_cov(&locs, p);
        let joint = ar_joint(&sigma, p.phi, days + HORIZON, init.variance_scale(p.phi));
        let mut obs = Vec::new();
        let mut vals = Vec::new();
        for t in 0..days {
            let xb = c.design.xb(t, &p.beta);
            for i in 0..n {
                obs.push(t * (n + 1) + i);
                vals.push(filled.get(i, t) - xb[i]);
            }
        }
        Oracle { joint, obs, vals, n }
    }

    /// Conditional law of the error at location `loc` (`n` = the site).
    fn error_law(&self, loc: usize, day: usize) -> (f64, f64) {
        condition(&self.joint, &self.obs, &self.vals, day * (self.n + 1) + loc)
    }
}

fn xb_site(site: &NewSite, t: usize, beta: &[f64]) -> f64 {
    (0..beta.len()).map(|j| site.covariates[(t, j)] * beta[j]).sum()
}

/// Largest absolute gap, over draws, targets and both moments, between
/// `draw_law` and the dense oracle.
pub fn max_scenario_error(seed: u64, n: usize, days: usize, init: InitialLaw) -> f64 {
    let c = case(seed, n, days);
    let samples = samples_from(c.draws.clone(), &c.panel, c.imputed.clone());
    let model = StModel::new(&c.domain, &c.design).with_init(init);
    let pred = Predictor::new(model, &samples, &c.panel).with_neighbors(n);
    let mut worst = 0.0f64;
    let mut gap = |a: (f64, f64), b: (f64, f64)| worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
    for (k, p) in c.draws.iter().enumerate() {
        let filled = samples.completed_panel(&c.panel, k);
        let oracle = Oracle::new(&c, p, &filled, init);
        // new location, observed days
        for t in 0..days {
            let (m, v) = oracle.error_law(n, t);
            gap(pred.draw_law(k, LawTarget::Site(&c.site), t).unwrap(), (m + xb_site(&c.site, t, &p.beta), v));
        }
        for h in 1..=HORIZON {
            let t = days + h - 1;
            // new location, future days
            let (m, v) = oracle.error_law(n, t);
            gap(pred.draw_law(k, LawTarget::Site(&c.site), t).unwrap(), (m + xb_site(&c.site, t, &p.beta), v));
            // fitted stations, future days
            for i in 0..n {
                let target = LawTarget::Station { index: i, future_design: &c.future };
                let (m, v) = oracle.error_law(i, t);
                gap(pred.draw_law(k, target, t).unwrap(), (m + c.future.xb(h - 1, &p.beta)[i], v));
            }
        }
    }
    worst
}

/// The instances checked: sizes 4 to 7 with `n·T ≤ 60` over training
/// plus forecast days, alternating initial laws.
pub fn oracle_instances() -> Vec<(u64, usize, usize, InitialLaw)> {
    (0..6u64)
        .map(|seed| {
            let n = 4 + seed as usize % 4;
            let days = 60 / (n + 1) - HORIZON;
            let init = if seed % 3 == 2 { InitialLaw::Diffuse } else { InitialLaw::Stationary };
            (seed, n, days, init)
        })
        .collect()
}

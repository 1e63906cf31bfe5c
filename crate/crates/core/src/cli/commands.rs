//! Stage implementations. Each reads its inputs from files under the
//! output directory (or configured paths) and writes its outputs there.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::baselines::{make_knot_grid, param_names, Baseline, BaselineKind, KnotSet};
use crate::error::{Error, Result};
use crate::inference::{self, McmcConfig, PosteriorSamples};
use crate::metrics::{MetricsReport, Scenario, ScenarioScores};
use crate::pipeline::{
    make_split, prepare, read_series, write_station_means, write_validation, Dataset, ModelData, PrepOptions, Split,
    SplitPlan, ValidationCell,
};
use crate::predict::{NewSite, PredictionRequest, Predictions, PredictiveDraws, Predictor};
use crate::spatial::{read_stations, Metric};
use crate::stmodel::{DesignTensor, InitialLaw, ModelParams, PriorSpec, StModel};
use crate::synth::{generate, SynthSpec};

use super::artifacts;
use super::config::RunConfig;
use super::manifest::RunManifest;

pub const COMMANDS: [&str; 6] = ["simulate", "prep", "fit", "predict", "evaluate", "compare"];

pub fn dataset_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.path("data.dir").unwrap_or_else(|| out.join("dataset"))
}

/// Runs one stage and writes its manifest.
pub fn execute(command: &str, cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let mut m = RunManifest::new(command, out, cfg.resolved());
    m.seeds.insert("seed".into(), cfg.uint("seed")?);
    let start = Instant::now();
    match command {
        "simulate" => simulate(cfg, out, &mut m)?,
        "prep" => prep(cfg, out, &mut m)?,
        "fit" => fit(cfg, out, &mut m)?,
        "predict" => predict(cfg, out, &mut m)?,
        "evaluate" => evaluate(cfg, out, &mut m)?,
        "compare" => compare(cfg, out, &mut m)?,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    }
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    let path = m.write()?;
    log::info!("{command}: manifest written to {}", path.display());
    Ok(m)
}

fn record_dir(m: &mut RunManifest, dir: &Path, inputs: bool) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    for f in files {
        if inputs {
            m.add_input(&f)?;
        } else {
            m.add_output(&f)?;
        }
    }
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    let spec = SynthSpec {
        n_locations: cfg.usize("synth.n_locations")?,
        n_days: cfg.usize("synth.n_days")?,
        beta: cfg.float_list("synth.beta")?,
        phi: cfg.float("synth.phi")?,
        sigma2: cfg.float("synth.sigma2")?,
        lengthscale: cfg.float("synth.lengthscale")?,
        tau2: cfg.float("synth.tau2")?,
        missing_frac: cfg.float("synth.missing_frac")?,
        seed: cfg.uint("seed")?,
    };
    m.seeds.insert("synth".into(), spec.seed);
    let synth = generate(&spec)?;
    let dir = dataset_dir(cfg, out);
    synth.write_dir(&dir)?;
    record_dir(m, &dir, false)
}

fn prep(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    let need = |key: &str| {
        cfg.path(key)
            .ok_or_else(|| Error::Config(format!("`{key}` must be set for prep")))
    };
    let (sp, wp, pp) = (need("data.stations")?, need("data.water_level")?, need("data.precipitation")?);
    for p in [&sp, &wp, &pp] {
        m.add_input(p)?;
    }
    let opts = PrepOptions {
        ma_window: cfg.usize("prep.ma_window")?,
        idw_power: cfg.float("prep.idw_power")?,
        holdout_days: cfg.usize("split.holdout_days")?,
        metric: Metric::parse(cfg.text("data.metric"))?,
    };
    let stations = read_stations(&sp)?;
    let (ds, means) = prepare(&stations, &read_series(&wp)?, &read_series(&pp)?, &opts)?;
    let dir = dataset_dir(cfg, out);
    ds.write_dir(&dir)?;
    let ids: Vec<String> = ds.stations.iter().map(|s| s.id.clone()).collect();
    write_station_means(&dir.join("station_means.csv"), &ids, &means)?;
    record_dir(m, &dir, false)
}

/// Everything the fitting and prediction stages derive from the dataset
/// and configuration.
pub struct Prepared {
    pub full: Dataset,
    pub split: Split,
    pub plan: SplitPlan,
    pub train: ModelData,
    pub request: PredictionRequest,
}

pub fn prepared(cfg: &RunConfig, full: Dataset) -> Result<Prepared> {
    let ids: Vec<String> = full.stations.iter().map(|s| s.id.clone()).collect();
    let plan = SplitPlan::random(
        &ids,
        cfg.usize("split.holdout_stations")?,
        cfg.usize("split.holdout_days")?,
        cfg.uint_or("split.seed", "seed")?,
    )?;
    let split = make_split(&full, &plan)?;
    let m = cfg.usize("model.m")?;
    let train = split.train.to_model(m)?;
    let horizon = if cfg.is_set("predict.horizon") {
        cfg.usize("predict.horizon")?
    } else {
        plan.holdout_days
    };
    let t0 = split.train_days;
    if t0 + horizon > full.days() {
        return Err(Error::Config(format!(
            "horizon {horizon} runs past the {} days with covariates",
            full.days()
        )));
    }
    let future_design: Option<DesignTensor> = if horizon > 0 {
        let all_days = full.subset(&split.train_stations, full.days()).to_model(m)?;
        Some(all_days.design.slice_days(t0, t0 + horizon))
    } else {
        None
    };
    let new_sites = split
        .holdout_stations
        .iter()
        .map(|&i| NewSite {
            location: full.stations[i].clone(),
            covariates: full.station_covariates(i),
        })
        .collect();
    Ok(Prepared {
        full,
        split,
        plan,
        train,
        request: PredictionRequest {
            new_sites,
            horizon,
            future_design,
        },
    })
}

pub fn prior_spec(cfg: &RunConfig, metric: Metric) -> Result<PriorSpec> {
    let hi = match cfg.text("prior.lengthscale_max") {
        // unit-square synthetic coordinates vs kilometres
        "auto" => match metric {
            Metric::Euclidean => 1.0,
            Metric::GreatCircle => 300.0,
        },
        _ => cfg.float("prior.lengthscale_max")?,
    };
    let prior = PriorSpec::default().with_lengthscale(cfg.float("prior.lengthscale_min")?, hi);
    prior.validate()?;
    Ok(prior)
}

pub fn mcmc_config(cfg: &RunConfig) -> Result<McmcConfig> {
    let c = McmcConfig {
        chains: cfg.usize("mcmc.chains")?,
        iterations: cfg.usize("mcmc.iterations")?,
        warmup: cfg.usize("mcmc.warmup")?,
        thin: cfg.usize("mcmc.thin")?,
        seed: cfg.uint_or("mcmc.seed", "seed")?,
        adapt_target: cfg.float("mcmc.adapt_target")?,
    };
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Nngp,
    Baseline(BaselineKind),
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nngp" => Ok(ModelKind::Nngp),
            other => BaselineKind::parse(other).map(ModelKind::Baseline),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Nngp => "nngp",
            ModelKind::Baseline(b) => b.as_str(),
        }
    }

    pub fn param_names(self, p: usize) -> Vec<String> {
        match self {
            ModelKind::Nngp => ModelParams::names(p),
            ModelKind::Baseline(b) => param_names(b, p),
        }
    }
}

fn baseline<'a>(cfg: &RunConfig, kind: BaselineKind, data: &'a ModelData) -> Result<Baseline<'a>> {
    let ceiling = cfg.usize("baseline.dense_ceiling")?;
    Ok(match kind {
        BaselineKind::Gpp => {
            let knots = make_knot_grid(data.domain.locations(), cfg.usize("baseline.knots")?, data.domain.metric())?;
            Baseline::gpp(&data.domain, &data.design, KnotSet::new(knots)?)?
        }
        BaselineKind::Gp1 => Baseline::gp1(&data.domain, &data.design).with_dense_ceiling(ceiling),
        BaselineKind::Gp2 => Baseline::gp2(&data.domain, &data.design).with_dense_ceiling(ceiling),
    })
}

fn st_model<'a>(cfg: &RunConfig, data: &'a ModelData) -> Result<StModel<'a>> {
    Ok(StModel::new(&data.domain, &data.design).with_init(InitialLaw::parse(cfg.text("model.init"))?))
}

pub fn fit_model(cfg: &RunConfig, kind: ModelKind, data: &ModelData) -> Result<PosteriorSamples> {
    let prior = prior_spec(cfg, data.domain.metric())?;
    let mcmc = mcmc_config(cfg)?;
    match kind {
        ModelKind::Nngp => inference::fit(&st_model(cfg, data)?, &data.panel, &prior, &mcmc),
        ModelKind::Baseline(b) => Ok(baseline(cfg, b, data)?.fit(&data.panel, &prior, &mcmc)?.samples),
    }
}

pub fn predict_model(
    cfg: &RunConfig,
    kind: ModelKind,
    data: &ModelData,
    samples: &PosteriorSamples,
    req: &PredictionRequest,
) -> Result<Predictions> {
    let seed = cfg.uint_or("predict.seed", "seed")?;
    match kind {
        ModelKind::Nngp => {
            let k = if cfg.is_set("model.neighbors") {
                cfg.usize("model.neighbors")?
            } else {
                cfg.usize("model.m")?
            };
            Predictor::new(st_model(cfg, data)?, samples, &data.panel)
                .with_neighbors(k)
                .with_seed(seed)
                .run(req)
        }
        ModelKind::Baseline(b) => {
            let bl = baseline(cfg, b, data)?;
            let fit = bl.attach_latent(&data.panel, samples.clone(), seed)?;
            bl.predict(&fit, &data.panel, req, seed)
        }
    }
}

/// Scores validation cells by scenario against predictive draws.
pub fn score(
    report: &mut MetricsReport,
    model: &str,
    validation: &[ValidationCell],
    draws: impl Fn(&str, usize) -> Option<PredictiveDraws>,
) -> Result<()> {
    for scenario in Scenario::ALL {
        let cells: Vec<&ValidationCell> = validation.iter().filter(|c| c.scenario == scenario).collect();
        if cells.is_empty() {
            continue;
        }
        let mut d = Vec::with_capacity(cells.len());
        for c in &cells {
            d.push(draws(&c.station_id, c.day).ok_or_else(|| {
                Error::Invalid(format!("no prediction for `{}` on day {}", c.station_id, c.day))
            })?);
        }
        let truth: Vec<f64> = cells.iter().map(|c| c.value).collect();
        let refs: Vec<&PredictiveDraws> = d.iter().collect();
        report.insert(model, scenario, ScenarioScores::compute(&refs, &truth)?);
    }
    Ok(())
}

fn load(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<Prepared> {
    let dir = dataset_dir(cfg, out);
    let full = Dataset::read_dir(&dir)?;
    for f in ["stations.csv", "panel.csv", "design.csv", "metric.txt"] {
        m.add_input(&dir.join(f))?;
    }
    let p = prepared(cfg, full)?;
    m.seeds.insert("split".into(), p.plan.seed);
    Ok(p)
}

fn fit(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    let p = load(cfg, out, m)?;
    let kind = ModelKind::parse(cfg.text("model.kind"))?;
    let split_dir = out.join("split");
    std::fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    write_validation(&split_dir.join("validation.csv"), &p.split.validation)?;
    let plan_path = split_dir.join("plan.json");
    std::fs::write(&plan_path, serde_json::to_string_pretty(&p.plan)?).map_err(|e| Error::io(&plan_path, e))?;

    m.seeds.insert("mcmc".into(), cfg.uint_or("mcmc.seed", "seed")?);
    let start = Instant::now();
    let samples = fit_model(cfg, kind, &p.train)?;
    m.timings.insert("sampling".into(), start.elapsed().as_secs_f64());
    for d in samples.diagnostics.iter().filter(|d| d.flagged()) {
        log::warn!("{}: R-hat {:?} suggests the chains have not mixed", d.name, d.rhat);
    }
    let dir = out.join("fit");
    artifacts::write_posterior(&dir.join("posterior.csv"), &samples)?;
    artifacts::write_imputed(&dir.join("imputed.csv"), &samples, &p.train.domain)?;
    artifacts::write_diagnostics(&dir.join("diagnostics.csv"), &samples)?;
    record_dir(m, &split_dir, false)?;
    record_dir(m, &dir, false)
}

fn predict(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    let p = load(cfg, out, m)?;
    let kind = ModelKind::parse(cfg.text("model.kind"))?;
    let fit_dir = out.join("fit");
    let (post, imp) = (fit_dir.join("posterior.csv"), fit_dir.join("imputed.csv"));
    m.add_input(&post)?;
    m.add_input(&imp)?;
    let names = kind.param_names(p.train.design.p());
    let samples = artifacts::read_samples(&post, &imp, &names, &p.train.domain, &p.train.panel)?;
    m.seeds.insert("predict".into(), cfg.uint_or("predict.seed", "seed")?);
    let start = Instant::now();
    let preds = predict_model(cfg, kind, &p.train, &samples, &p.request)?;
    m.timings.insert("prediction".into(), start.elapsed().as_secs_f64());
    let dir = out.join("predict");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    preds.write_csv(&dir.join("predictions.csv"))?;
    artifacts::write_draws(&dir.join("draws.csv"), &preds)?;
    let means_path = dataset_dir(cfg, out).join("station_means.csv");
    if means_path.is_file() {
        m.add_input(&means_path)?;
        let means = crate::pipeline::read_station_means(&means_path)?;
        let mut original = preds.clone();
        original.back_transform(&means);
        original.write_csv(&dir.join("predictions_original.csv"))?;
    }
    record_dir(m, &dir, false)
}

fn evaluate(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    let (vpath, dpath) = (out.join("split").join("validation.csv"), out.join("predict").join("draws.csv"));
    m.add_input(&vpath)?;
    m.add_input(&dpath)?;
    let validation = artifacts::read_validation(&vpath)?;
    let draws: HashMap<(String, usize), PredictiveDraws> = artifacts::read_draws(&dpath)?;
    let mut report = MetricsReport::default();
    let model = ModelKind::parse(cfg.text("model.kind"))?.as_str();
    score(&mut report, model, &validation, |id, t| draws.get(&(id.to_string(), t)).cloned())?;
    let dir = out.join("evaluate");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    report.write(&dir.join("metrics.csv"), &dir.join("metrics.txt"))?;
    print!("{}", report.to_table());
    record_dir(m, &dir, false)
}

fn compare(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    let p = load(cfg, out, m)?;
    let kinds = cfg
        .text("compare.models")
        .split(',')
        .map(ModelKind::parse)
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::default();
    for kind in kinds {
        let start = Instant::now();
        let samples = fit_model(cfg, kind, &p.train)?;
        let preds = predict_model(cfg, kind, &p.train, &samples, &p.request)?;
        m.timings.insert(kind.as_str().into(), start.elapsed().as_secs_f64());
        score(&mut report, kind.as_str(), &p.split.validation, |id, t| {
            preds.get(id, t).map(|x| x.draws.clone())
        })?;
    }
    let dir = out.join("compare");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    report.write(&dir.join("metrics.csv"), &dir.join("table.txt"))?;
    print!("{}", report.to_table());
    record_dir(m, &dir, false)
}

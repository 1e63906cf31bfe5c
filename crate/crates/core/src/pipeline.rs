//! Data preparation: raw station series to a modelling dataset, and the
//! out-of-sample split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Scenario;
use crate::spatial::{read_stations, write_stations, Location, Metric, SpatialDomain};
use crate::stmodel::{DesignTensor, ResponsePanel};

/// Distance in km below which an IDW target sits on an observation.
pub const IDW_EXACT_TOL: f64 = 1e-9;

/// Subtracts each station's mean over its first `days` values.
pub fn center_by_station_over(rows: &[Vec<Option<f64>>], days: usize) -> Result<(Vec<Vec<Option<f64>>>, Vec<f64>)> {
    let mut means = Vec::with_capacity(rows.len());
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let obs: Vec<f64> = row.iter().take(days).flatten().copied().collect();
        if obs.is_empty() {
            return Err(Error::Invalid(format!("station {i} has no observed values to center")));
        }
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        out.push(row.iter().map(|v| v.map(|x| x - mean)).collect());
        means.push(mean);
    }
    Ok((out, means))
}

/// Subtracts each station's mean over all its observed values.
pub fn center_by_station(rows: &[Vec<Option<f64>>]) -> Result<(Vec<Vec<Option<f64>>>, Vec<f64>)> {
    let days = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    center_by_station_over(rows, days)
}

/// Trailing moving average over days `t - window + 1 ..= t`, ignoring
/// missing inputs. A window with no observed value stays missing.
pub fn moving_average(series: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let window = window.max(1);
    (0..series.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let vals: Vec<f64> = series[lo..=t].iter().flatten().copied().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

pub fn moving_average_5(series: &[Option<f64>]) -> Vec<Option<f64>> {
    moving_average(series, 5)
}

/// Inverse-distance-weighted value at `target` from observations with
/// finite values; `None` when there are none.
pub fn idw_interpolate(
    points: &[Location],
    values: &[Option<f64>],
    target: &Location,
    power: f64,
    metric: Metric,
) -> Option<f64> {
    let obs: Vec<(f64, f64)> = points
        .iter()
        .zip(values)
        .filter_map(|(p, v)| v.filter(|x| x.is_finite()).map(|v| (metric.distance(p, target), v)))
        .collect();
    let d_min = obs.iter().map(|o| o.0).fold(f64::INFINITY, f64::min);
    if d_min < IDW_EXACT_TOL {
        return obs.iter().find(|o| o.0 == d_min).map(|o| o.1);
    }
    // weights relative to the closest point keep the arithmetic well scaled
    let mut num = 0.0;
    let mut den = 0.0;
    for (d, v) in obs {
        let w = (d_min / d).powf(power);
        num += w * v;
        den += w;
    }
    (den > 0.0).then(|| num / den)
}

/// One raw observation row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub station_id: String,
    pub date: String,
    pub value: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    station_id: String,
    date: String,
    value: Option<String>,
}

/// Reads `station_id,date,value`; empty or `NA` values are missing.
pub fn read_series(path: &Path) -> Result<Vec<RawRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let rec: RawRecord = rec?;
        let value = match rec.value.as_deref().map(str::trim) {
            None | Some("") | Some("NA") | Some("NaN") => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| Error::Invalid(format!("{}: bad value `{s}`", path.display())))?,
            ),
        };
        rows.push(RawRow {
            station_id: rec.station_id,
            date: rec.date.trim().to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Calendar of the series: either integer day indices or ISO dates.
#[derive(Debug, Clone, PartialEq)]
pub enum Calendar {
    Index { first: i64 },
    Dates { first: NaiveDate },
}

enum DayKey {
    Index(i64),
    Date(NaiveDate),
}

fn parse_day(s: &str) -> Result<DayKey> {
    if let Ok(k) = s.parse::<i64>() {
        return Ok(DayKey::Index(k));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(DayKey::Date)
        .map_err(|_| Error::Invalid(format!("`{s}` is neither a day index nor an ISO date")))
}

/// Maps the date strings of several series onto one contiguous day axis.
pub fn build_calendar<'a>(dates: impl Iterator<Item = &'a str>) -> Result<(Calendar, usize, HashMap<String, usize>)> {
    let mut idx = BTreeSet::new();
    let mut dts = BTreeSet::new();
    let mut raw = BTreeSet::new();
    for s in dates {
        if raw.insert(s.to_string()) {
            match parse_day(s)? {
                DayKey::Index(k) => idx.insert(k),
                DayKey::Date(d) => dts.insert(d),
            };
        }
    }
    if !idx.is_empty() && !dts.is_empty() {
        return Err(Error::Invalid("series mix day indices and ISO dates".into()));
    }
    let mut map = HashMap::new();
    if let (Some(&first), Some(&last)) = (idx.first(), idx.last()) {
        for s in &raw {
            if let Ok(DayKey::Index(k)) = parse_day(s) {
                map.insert(s.clone(), (k - first) as usize);
            }
        }
        return Ok((Calendar::Index { first }, (last - first + 1) as usize, map));
    }
    if let (Some(&first), Some(&last)) = (dts.first(), dts.last()) {
        for s in &raw {
            if let Ok(DayKey::Date(d)) = parse_day(s) {
                map.insert(s.clone(), (d - first).num_days() as usize);
            }
        }
        return Ok((Calendar::Dates { first }, ((last - first).num_days() + 1) as usize, map));
    }
    Err(Error::Invalid("no rows in the input series".into()))
}

/// Station × day table from raw rows; gaps become missing.
pub fn assemble(
    rows: &[RawRow],
    stations: &[String],
    days: usize,
    day_of: &HashMap<String, usize>,
) -> Result<Vec<Vec<Option<f64>>>> {
    let pos: HashMap<&str, usize> = stations.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out = vec![vec![None; days]; stations.len()];
    let mut seen = BTreeSet::new();
    for r in rows {
        let i = *pos
            .get(r.station_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("station `{}` is not in the stations file", r.station_id)))?;
        let t = day_of[&r.date];
        if !seen.insert((i, t)) {
            return Err(Error::Invalid(format!(
                "duplicate row for station `{}` on `{}`",
                r.station_id, r.date
            )));
        }
        out[i][t] = r.value;
    }
    Ok(out)
}

/// Response panel and covariates for a set of stations, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stations: Vec<Location>,
    pub metric: Metric,
    /// Covariate names, starting with `intercept`.
    pub covariate_names: Vec<String>,
    /// `values[station][day]`.
    pub values: Vec<Vec<Option<f64>>>,
    /// `covariates[day]` is `n × p`.
    pub covariates: Vec<DMatrix<f64>>,
}

/// A dataset arranged in model order.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub domain: SpatialDomain,
    pub design: DesignTensor,
    pub panel: ResponsePanel,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.stations.len()
    }

    pub fn days(&self) -> usize {
        self.covariates.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, p) = (self.n(), self.p());
        if self.covariate_names.first().map(String::as_str) != Some("intercept") {
            return Err(Error::Invalid("first covariate must be `intercept`".into()));
        }
        if self.values.len() != n || self.values.iter().any(|r| r.len() != self.days()) {
            return Err(Error::Dimension("values do not cover every station and day".into()));
        }
        if self.covariates.iter().any(|x| x.nrows() != n || x.ncols() != p) {
            return Err(Error::Dimension(format!("covariates must be {n} × {p} per day")));
        }
        Ok(())
    }

    /// Station rows `keep` (input order) over days `0..days`.
    pub fn subset(&self, keep: &[usize], days: usize) -> Dataset {
        Dataset {
            stations: keep.iter().map(|&i| self.stations[i].clone()).collect(),
            metric: self.metric,
            covariate_names: self.covariate_names.clone(),
            values: keep.iter().map(|&i| self.values[i][..days].to_vec()).collect(),
            covariates: self.covariates[..days]
                .iter()
                .map(|x| DMatrix::from_fn(keep.len(), x.ncols(), |r, c| x[(keep[r], c)]))
                .collect(),
        }
    }

    /// Covariates of one station as a `days × p` matrix.
    pub fn station_covariates(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.days(), self.p(), |t, c| self.covariates[t][(i, c)])
    }

    /// Builds the neighbor domain and permutes rows into model order.
    pub fn to_model(&self, m: usize) -> Result<ModelData> {
        self.validate()?;
        let domain = SpatialDomain::new(self.stations.clone(), m, self.metric)?;
        let order = domain.order().to_vec();
        let rows: Vec<Vec<Option<f64>>> = order.iter().map(|&k| self.values[k].clone()).collect();
        let panel = ResponsePanel::from_rows(&rows)?;
        let x = self
            .covariates
            .iter()
            .map(|xt| DMatrix::from_fn(order.len(), xt.ncols(), |r, c| xt[(order[r], c)]))
            .collect();
        let design = DesignTensor::new(x, self.covariate_names.clone())?;
        Ok(ModelData { domain, design, panel })
    }

    /// Writes `stations.csv`, `panel.csv` and `design.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_stations(&dir.join("stations.csv"), &self.stations)?;
        let path = dir.join("panel.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["station_id", "day", "value"])?;
        for (i, s) in self.stations.iter().enumerate() {
            for t in 0..self.days() {
                let v = self.values[i][t].map(|v| v.to_string()).unwrap_or_default();
                w.write_record([s.id.as_str(), &t.to_string(), &v])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("design.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["station_id".to_string(), "day".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for (i, s) in self.stations.iter().enumerate() {
            for (t, x) in self.covariates.iter().enumerate() {
                let mut rec = vec![s.id.clone(), t.to_string()];
                rec.extend((0..self.p()).map(|c| x[(i, c)].to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let meta = dir.join("metric.txt");
        std::fs::write(&meta, metric_name(self.metric)).map_err(|e| Error::io(&meta, e))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Dataset> {
        let meta = dir.join("metric.txt");
        let metric = Metric::parse(std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?.trim())?;
        let stations = read_stations(&dir.join("stations.csv"))?;
        let pos: HashMap<String, usize> = stations.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        let n = stations.len();

        let path = dir.join("design.csv");
        let mut rdr = open_csv(&path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() < 3 || header[0] != "station_id" || header[1] != "day" {
            return Err(Error::Invalid(format!("{}: unexpected header", path.display())));
        }
        let names: Vec<String> = header[2..].to_vec();
        let p = names.len();
        let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let i = lookup(&pos, &rec[0])?;
            let t = parse_usize(&rec[1])?;
            let x = (0..p)
                .map(|c| rec[2 + c].parse::<f64>().map_err(|_| Error::Invalid(format!("bad covariate `{}`", &rec[2 + c]))))
                .collect::<Result<Vec<f64>>>()?;
            cells.insert((i, t), x);
        }
        let days = cells.keys().map(|&(_, t)| t + 1).max().unwrap_or(0);
        if cells.len() != n * days {
            return Err(Error::Invalid(format!("{}: covariates missing for some station-days", path.display())));
        }
        let mut covariates = vec![DMatrix::zeros(n, p); days];
        for ((i, t), x) in cells {
            for (c, v) in x.into_iter().enumerate() {
                covariates[t][(i, c)] = v;
            }
        }

        let path = dir.join("panel.csv");
        let mut rdr = open_csv(&path)?;
        let mut values = vec![vec![None; days]; n];
        for rec in rdr.records() {
            let rec = rec?;
            let i = lookup(&pos, &rec[0])?;
            let t = parse_usize(&rec[1])?;
            if t >= days {
                return Err(Error::Invalid(format!("{}: day {t} has no covariates", path.display())));
            }
            let v = rec[2].trim();
            if !v.is_empty() {
                values[i][t] = Some(v.parse::<f64>().map_err(|_| Error::Invalid(format!("bad value `{v}`")))?);
            }
        }
        let ds = Dataset {
            stations,
            metric,
            covariate_names: names,
            values,
            covariates,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::GreatCircle => "geodetic",
        Metric::Euclidean => "planar",
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn lookup(pos: &HashMap<String, usize>, id: &str) -> Result<usize> {
    pos.get(id)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("unknown station `{id}`")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("bad day index `{s}`")))
}

/// Options for turning raw series into a dataset.
#[derive(Debug, Clone)]
pub struct PrepOptions {
    pub ma_window: usize,
    pub idw_power: f64,
    /// Trailing days excluded from the centering mean.
    pub holdout_days: usize,
    pub metric: Metric,
}

impl Default for PrepOptions {
    fn default() -> Self {
        PrepOptions {
            ma_window: 5,
            idw_power: 2.0,
            holdout_days: 5,
            metric: Metric::GreatCircle,
        }
    }
}

/// Centered water levels with smoothed, interpolated precipitation.
/// Returns the dataset and each station's centering mean.
pub fn prepare(
    stations: &[Location],
    water: &[RawRow],
    precip: &[RawRow],
    opts: &PrepOptions,
) -> Result<(Dataset, Vec<f64>)> {
    let by_id: HashMap<&str, &Location> = stations.iter().map(|s| (s.id.as_str(), s)).collect();
    let wl_ids: Vec<String> = water.iter().map(|r| r.station_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let pr_ids: Vec<String> = precip.iter().map(|r| r.station_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let locate = |ids: &[String]| -> Result<Vec<Location>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|l| (*l).clone())
                    .ok_or_else(|| Error::Invalid(format!("station `{id}` is not in the stations file")))
            })
            .collect()
    };
    let wl_locs = locate(&wl_ids)?;
    let pr_locs = locate(&pr_ids)?;
    let (_, days, day_of) = build_calendar(water.iter().chain(precip).map(|r| r.date.as_str()))?;
    let wl = assemble(water, &wl_ids, days, &day_of)?;
    let pr: Vec<Vec<Option<f64>>> = assemble(precip, &pr_ids, days, &day_of)?
        .iter()
        .map(|s| moving_average(s, opts.ma_window))
        .collect();
    if opts.holdout_days >= days {
        return Err(Error::Config(format!(
            "holdout of {} days leaves no training days out of {days}",
            opts.holdout_days
        )));
    }
    let (centered, means) = center_by_station_over(&wl, days - opts.holdout_days)?;
    let n = wl_locs.len();
    let mut covariates = Vec::with_capacity(days);
    let mut gaps = Vec::new();
    for t in 0..days {
        let day_vals: Vec<Option<f64>> = pr.iter().map(|s| s[t]).collect();
        let mut x = DMatrix::zeros(n, 2);
        for (i, loc) in wl_locs.iter().enumerate() {
            x[(i, 0)] = 1.0;
            match idw_interpolate(&pr_locs, &day_vals, loc, opts.idw_power, opts.metric) {
                Some(v) => x[(i, 1)] = v,
                None => {
                    x[(i, 1)] = f64::NAN;
                    if gaps.last() != Some(&t) {
                        gaps.push(t);
                    }
                }
            }
        }
        covariates.push(x);
    }
    // leading days without any precipitation record are trimmed; later gaps
    // cannot be filled without inventing covariates
    let start = gaps.iter().enumerate().take_while(|(k, &t)| *k == t).count();
    if gaps.len() > start {
        return Err(Error::Invalid(format!(
            "precipitation unavailable on days {:?}; covariates cannot be formed",
            &gaps[start..]
        )));
    }
    if start >= days - opts.holdout_days {
        return Err(Error::Invalid("no training days with precipitation".into()));
    }
    let ds = Dataset {
        stations: wl_locs,
        metric: opts.metric,
        covariate_names: vec!["intercept".into(), "precipitation".into()],
        values: centered.into_iter().map(|r| r[start..].to_vec()).collect(),
        covariates: covariates.split_off(start),
    };
    ds.validate()?;
    Ok((ds, means))
}

/// Which stations and trailing days are held out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub holdout_stations: Vec<String>,
    pub holdout_days: usize,
    pub seed: u64,
}

impl SplitPlan {
    /// Selects `count` holdout stations uniformly at random.
    pub fn random(station_ids: &[String], count: usize, holdout_days: usize, seed: u64) -> Result<Self> {
        if count >= station_ids.len() && !station_ids.is_empty() {
            return Err(Error::Config(format!(
                "cannot hold out {count} of {} stations",
                station_ids.len()
            )));
        }
        let mut ids = station_ids.to_vec();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        ids.truncate(count);
        ids.sort();
        Ok(SplitPlan {
            holdout_stations: ids,
            holdout_days,
            seed,
        })
    }
}

/// A held-out observed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCell {
    pub station_id: String,
    pub day: usize,
    pub value: f64,
    pub scenario: Scenario,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub validation: Vec<ValidationCell>,
    /// Input indices of training stations in `dataset`.
    pub train_stations: Vec<usize>,
    pub holdout_stations: Vec<usize>,
    pub train_days: usize,
}

/// Splits observed cells into training and validation sets.
pub fn make_split(data: &Dataset, plan: &SplitPlan) -> Result<Split> {
    let days = data.days();
    let mut holdout = Vec::new();
    for id in &plan.holdout_stations {
        holdout.push(
            data.index_of(id)
                .ok_or_else(|| Error::Invalid(format!("holdout station `{id}` is not in the dataset")))?,
        );
    }
    holdout.sort_unstable();
    holdout.dedup();
    let train_stations: Vec<usize> = (0..data.n()).filter(|i| !holdout.contains(i)).collect();
    if train_stations.is_empty() || plan.holdout_days >= days {
        return Err(Error::Invalid("the split leaves no training data".into()));
    }
    let train_days = days - plan.holdout_days;
    let mut validation = Vec::new();
    for i in 0..data.n() {
        let held = holdout.contains(&i);
        for t in 0..days {
            let Some(v) = data.values[i][t] else { continue };
            if let Some(scenario) = Scenario::classify(held, t >= train_days) {
                validation.push(ValidationCell {
                    station_id: data.stations[i].id.clone(),
                    day: t,
                    value: v,
                    scenario,
                });
            }
        }
    }
    Ok(Split {
        train: data.subset(&train_stations, train_days),
        validation,
        train_stations,
        holdout_stations: holdout,
        train_days,
    })
}

pub fn write_validation(path: &Path, cells: &[ValidationCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station_id", "day", "value", "scenario"])?;
    for c in cells {
        w.write_record([c.station_id.as_str(), &c.day.to_string(), &c.value.to_string(), c.scenario.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_station_means(path: &Path, ids: &[String], means: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station_id", "mean"])?;
    for (id, m) in ids.iter().zip(means) {
        w.write_record([id.as_str(), &m.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_station_means(path: &Path) -> Result<HashMap<String, f64>> {
    let mut rdr = open_csv(path)?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let m = rec[1]
            .parse::<f64>()
            .map_err(|_| Error::Invalid(format!("bad mean `{}`", &rec[1])))?;
        out.insert(rec[0].to_string(), m);
    }
    Ok(out)
}

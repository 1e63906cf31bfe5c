//! CSV files passed between stages. Floats are written in shortest
//! round-trip form so a read-back reproduces every bit.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::PosteriorSamples;
use crate::pipeline::ValidationCell;
use crate::predict::{PredictiveDraws, Predictions};
use crate::spatial::SpatialDomain;
use crate::stmodel::{ModelParams, ResponsePanel};
use crate::metrics::Scenario;

fn writer(path: &Path) -> Result<BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("{}: cannot parse `{s}`", path.display())))
}

/// `chain,iteration,param,value`.
pub fn write_posterior(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "chain,iteration,param,value")?;
        for (c, chain) in samples.draws.iter().enumerate() {
            for (it, p) in chain.iter().enumerate() {
                for (name, v) in samples.param_names.iter().zip(p.to_vec()) {
                    writeln!(w, "{c},{it},{name},{v}")?;
                }
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// `chain,iteration,station_id,day,value` for every missing cell.
pub fn write_imputed(path: &Path, samples: &PosteriorSamples, domain: &SpatialDomain) -> Result<()> {
    let mut w = writer(path)?;
    let locs = domain.locations();
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "chain,iteration,station_id,day,value")?;
        for (c, chain) in samples.imputed.iter().enumerate() {
            for (it, vals) in chain.iter().enumerate() {
                for (&(i, t), v) in samples.missing_cells.iter().zip(vals) {
                    writeln!(w, "{c},{it},{},{t},{v}", locs[i].id)?;
                }
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn write_diagnostics(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let mut w = writer(path)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "param,rhat,ess_bulk,flagged")?;
        for d in &samples.diagnostics {
            writeln!(w, "{},{},{},{}", d.name, opt(d.rhat), opt(d.ess_bulk), d.flagged())?;
        }
        for (c, a) in samples.acceptance.iter().enumerate() {
            writeln!(w, "acceptance_chain{c},NA,NA,{a}")?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// Reads the posterior and imputation files back into samples for a
/// training panel with the given parameter names.
pub fn read_samples(
    posterior: &Path,
    imputed: &Path,
    names: &[String],
    domain: &SpatialDomain,
    panel: &ResponsePanel,
) -> Result<PosteriorSamples> {
    let mut values: BTreeMap<(usize, usize), Vec<Option<f64>>> = BTreeMap::new();
    let col: HashMap<&str, usize> = names.iter().enumerate().map(|(k, n)| (n.as_str(), k)).collect();
    for rec in reader(posterior)?.records() {
        let rec = rec?;
        let key = (num(posterior, &rec[0])?, num(posterior, &rec[1])?);
        let k = *col
            .get(&rec[2])
            .ok_or_else(|| Error::Invalid(format!("{}: unexpected parameter `{}`", posterior.display(), &rec[2])))?;
        values.entry(key).or_insert_with(|| vec![None; names.len()])[k] = Some(num(posterior, &rec[3])?);
    }
    let chains = values.keys().map(|&(c, _)| c + 1).max().unwrap_or(0);
    let mut draws: Vec<Vec<ModelParams>> = vec![Vec::new(); chains];
    for ((c, it), v) in values {
        if it != draws[c].len() || v.iter().any(Option::is_none) {
            return Err(Error::Invalid(format!("{}: incomplete draw {c}/{it}", posterior.display())));
        }
        let v: Vec<f64> = v.into_iter().flatten().collect();
        draws[c].push(ModelParams::from_vec(&v));
    }
    if draws.iter().any(Vec::is_empty) {
        return Err(Error::Invalid(format!("{}: no draws", posterior.display())));
    }

    let missing = panel.missing_cells();
    let slot: HashMap<(usize, usize), usize> = missing.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let mut imp: Vec<Vec<Vec<f64>>> = draws.iter().map(|c| vec![vec![f64::NAN; missing.len()]; c.len()]).collect();
    if !missing.is_empty() {
        for rec in reader(imputed)?.records() {
            let rec = rec?;
            let (c, it): (usize, usize) = (num(imputed, &rec[0])?, num(imputed, &rec[1])?);
            let i = domain
                .index_of(&rec[2])
                .ok_or_else(|| Error::Invalid(format!("{}: unknown station `{}`", imputed.display(), &rec[2])))?;
            let t: usize = num(imputed, &rec[3])?;
            let k = slot
                .get(&(i, t))
                .ok_or_else(|| Error::Invalid(format!("{}: cell {}/{t} is not missing", imputed.display(), &rec[2])))?;
            let row = imp
                .get_mut(c)
                .and_then(|ch| ch.get_mut(it))
                .ok_or_else(|| Error::Invalid(format!("{}: draw {c}/{it} has no parameters", imputed.display())))?;
            row[*k] = num(imputed, &rec[4])?;
        }
        if imp.iter().flatten().flatten().any(|v| v.is_nan()) {
            return Err(Error::Invalid(format!("{}: imputations incomplete", imputed.display())));
        }
    }
    let mut samples = PosteriorSamples {
        param_names: names.to_vec(),
        draws,
        missing_cells: missing,
        imputed: imp,
        acceptance: Vec::new(),
        diagnostics: Vec::new(),
        elapsed_secs: 0.0,
    };
    samples.compute_diagnostics();
    Ok(samples)
}

/// `station_id,day,draws` with the draws space-separated.
pub fn write_draws(path: &Path, preds: &Predictions) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "station_id,day,draws")?;
        for t in &preds.targets {
            write!(w, "{},{},", t.station_id, t.day)?;
            for (k, v) in t.draws.samples.iter().enumerate() {
                if k > 0 {
                    write!(w, " ")?;
                }
                write!(w, "{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_draws(path: &Path) -> Result<HashMap<(String, usize), PredictiveDraws>> {
    let mut out = HashMap::new();
    for rec in reader(path)?.records() {
        let rec = rec?;
        let samples = rec[2]
            .split_whitespace()
            .map(|s| num(path, s))
            .collect::<Result<Vec<f64>>>()?;
        out.insert((rec[0].to_string(), num(path, &rec[1])?), PredictiveDraws::from_samples(samples));
    }
    Ok(out)
}

pub fn read_validation(path: &Path) -> Result<Vec<ValidationCell>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec?;
        let scenario = Scenario::ALL
            .into_iter()
            .find(|s| s.as_str() == &rec[3])
            .ok_or_else(|| Error::Invalid(format!("{}: unknown scenario `{}`", path.display(), &rec[3])))?;
        out.push(ValidationCell {
            station_id: rec[0].to_string(),
            day: num(path, &rec[1])?,
            value: num(path, &rec[2])?,
            scenario,
        });
    }
    Ok(out)
}

//! Synthetic spatiotemporal data on the unit square, drawn from the exact
//! (dense) model, with uniformly injected missing values.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{cov_matrix, ExponentialKernel, Nugget};
use crate::error::{Error, Result};
use crate::pipeline::Dataset;
use crate::spatial::{Location, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_locations: usize,
    pub n_days: usize,
    pub beta: Vec<f64>,
    pub phi: f64,
    pub sigma2: f64,
    pub lengthscale: f64,
    pub tau2: f64,
    pub missing_frac: f64,
    pub seed: u64,
}

/// Nugget used when the generator's `0.1²` is read literally.
pub const LEGACY_TAU2: f64 = 0.01;

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_locations: 100,
            n_days: 20,
            beta: vec![1.0, 3.0],
            phi: 0.9,
            sigma2: 1.0,
            lengthscale: 0.3,
            tau2: 0.1,
            missing_frac: 0.10,
            seed: 1,
        }
    }
}

impl SynthSpec {
    /// Switches to the literal-square reading of the nugget.
    pub fn legacy_notation(mut self) -> Self {
        self.tau2 = LEGACY_TAU2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_locations == 0 || self.n_days == 0 {
            return Err(Error::Invalid("need at least one location and one day".into()));
        }
        if self.beta.is_empty() {
            return Err(Error::Invalid("beta needs at least the intercept".into()));
        }
        if !(self.phi.abs() < 1.0) {
            return Err(Error::Invalid(format!("phi = {} must satisfy |phi| < 1", self.phi)));
        }
        if !(self.sigma2 > 0.0 && self.tau2 > 0.0 && self.lengthscale > 0.0) {
            return Err(Error::Invalid("variances and length-scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.missing_frac) {
            return Err(Error::Invalid(format!("missing_frac {} not in [0, 1)", self.missing_frac)));
        }
        Ok(())
    }
}

/// Everything the generator drew.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub spec: SynthSpec,
    /// Dataset with the mask applied.
    pub data: Dataset,
    /// Complete responses, `truth[station][day]`.
    pub truth: Vec<Vec<f64>>,
    /// `X_t β + φ (y_{t-1} - X_{t-1} β)` at every cell.
    pub mean_path: Vec<Vec<f64>>,
    /// Masked `(station, day)` cells, sorted.
    pub mask: Vec<(usize, usize)>,
}

/// Draws a dataset from `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let (n, days, p) = (spec.n_locations, spec.n_days, spec.beta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stations: Vec<Location> = (0..n)
        .map(|i| {
            let x: f64 = rng.random();
            let y: f64 = rng.random();
            Location::planar(format!("s{:03}", i + 1), x, y)
        })
        .collect::<Result<_>>()?;
    let kernel = ExponentialKernel::new(spec.sigma2, spec.lengthscale)?;
    let cov = cov_matrix(&kernel, Metric::Euclidean, &stations, &stations, Some(Nugget::new(spec.tau2)?))?;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("synthetic covariance is not positive definite".into()))?
        .l();
    let covariates: Vec<DMatrix<f64>> = (0..days)
        .map(|_| {
            DMatrix::from_fn(n, p, |_, c| {
                if c == 0 {
                    1.0
                } else {
                    rng.sample(StandardNormal)
                }
            })
        })
        .collect();
    let beta = DVector::from_column_slice(&spec.beta);
    let mut truth = vec![vec![0.0; days]; n];
    let mut mean_path = vec![vec![0.0; days]; n];
    let mut prev_resid = DVector::<f64>::zeros(n);
    for t in 0..days {
        let xb = &covariates[t] * &beta;
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut noise = &chol * z;
        if t == 0 {
            noise /= (1.0 - spec.phi * spec.phi).sqrt();
        }
        let mu = &xb + spec.phi * &prev_resid;
        let y = &mu + noise;
        for i in 0..n {
            truth[i][t] = y[i];
            mean_path[i][t] = mu[i];
        }
        prev_resid = y - xb;
    }
    let mask = inject_missing_cells(n, days, spec.missing_frac, &mut rng)?;
    let mut values: Vec<Vec<Option<f64>>> = truth.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
    for &(i, t) in &mask {
        values[i][t] = None;
    }
    let mut names = vec!["intercept".to_string()];
    names.extend((1..p).map(|k| if p == 2 { "x".to_string() } else { format!("x{k}") }));
    let data = Dataset {
        stations,
        metric: Metric::Euclidean,
        covariate_names: names,
        values,
        covariates,
    };
    Ok(Synthetic {
        spec: spec.clone(),
        data,
        truth,
        mean_path,
        mask,
    })
}

fn inject_missing_cells<R: Rng + ?Sized>(n: usize, days: usize, frac: f64, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Invalid(format!("missing fraction {frac} not in [0, 1)")));
    }
    let cells = n * days;
    let k = (frac * cells as f64).floor() as usize;
    if k == 0 {
        return Ok(Vec::new());
    }
    if k > n * (days - 1) {
        return Err(Error::Invalid(format!(
            "cannot mask {k} of {cells} cells without emptying a station"
        )));
    }
    for _ in 0..1000 {
        let mut chosen: Vec<(usize, usize)> = sample(rng, cells, k).into_iter().map(|c| (c / days, c % days)).collect();
        chosen.sort_unstable();
        let mut per_station = vec![0usize; n];
        for &(i, _) in &chosen {
            per_station[i] += 1;
        }
        if per_station.iter().all(|&c| c < days) {
            return Ok(chosen);
        }
    }
    Err(Error::Invalid("could not find a mask leaving every station observed".into()))
}

/// Masks `⌊frac · cells⌋` observed-or-not cells uniformly, never a whole station.
pub fn inject_missing(values: &[Vec<Option<f64>>], frac: f64, seed: u64) -> Result<Vec<Vec<Option<f64>>>> {
    let n = values.len();
    let days = values.first().map_or(0, |r| r.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = inject_missing_cells(n, days, frac, &mut rng)?;
    let mut out = values.to_vec();
    for (i, t) in mask {
        out[i][t] = None;
    }
    Ok(out)
}

impl Synthetic {
    /// Writes the dataset plus `truth.csv` (spec values) and
    /// `truth_values.csv` (complete responses with the mask flag).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.data.write_dir(dir)?;
        let path = dir.join("truth.csv");
        let mut body = String::from("parameter,value\n");
        let s = &self.spec;
        for (k, b) in s.beta.iter().enumerate() {
            body.push_str(&format!("beta{k},{b}\n"));
        }
        for (name, v) in [
            ("phi", s.phi),
            ("sigma2", s.sigma2),
            ("tau2", s.tau2),
            ("lengthscale", s.lengthscale),
            ("missing_frac", s.missing_frac),
            ("n_locations", s.n_locations as f64),
            ("n_days", s.n_days as f64),
            ("seed", s.seed as f64),
        ] {
            body.push_str(&format!("{name},{v}\n"));
        }
        write_file(&path, &body)?;
        let path = dir.join("truth_values.csv");
        let mut body = String::from("station_id,day,value,mean,masked\n");
        for (i, loc) in self.data.stations.iter().enumerate() {
            for t in 0..self.spec.n_days {
                let masked = self.mask.binary_search(&(i, t)).is_ok();
                body.push_str(&format!(
                    "{},{t},{},{},{}\n",
                    loc.id, self.truth[i][t], self.mean_path[i][t], masked as u8
                ));
            }
        }
        write_file(&path, &body)
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cell_counts() {
        let s = generate(&SynthSpec::default()).unwrap();
        assert_eq!(s.data.n() * s.data.days(), 2000);
        assert_eq!(s.mask.len(), 200);
        let missing: usize = s.data.values.iter().map(|r| r.iter().filter(|v| v.is_none()).count()).sum();
        assert_eq!(missing, 200);
        assert!(s.data.values.iter().all(|r| r.iter().any(|v| v.is_some())));
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SynthSpec { n_locations: 12, n_days: 4, ..SynthSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
        let c = generate(&SynthSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn missing_injection_rules() {
        let vals = vec![vec![Some(1.0); 20]; 100];
        assert_eq!(inject_missing(&vals, 0.0, 3).unwrap(), vals);
        let m = inject_missing(&vals, 0.1, 3).unwrap();
        assert_eq!(m.iter().flatten().filter(|v| v.is_none()).count(), 200);
        assert_eq!(m, inject_missing(&vals, 0.1, 3).unwrap());
        assert!(inject_missing(&vec![vec![Some(1.0); 2]; 3], 0.7, 1).is_err());
        assert!(inject_missing(&vals, 1.0, 1).is_err());
    }

    #[test]
    fn independent_days_without_persistence() {
        // lag-one correlation of residuals averages to ~0 when phi = 0
        let mut acc = 0.0;
        for seed in 0..50 {
            let spec = SynthSpec {
                n_locations: 20,
                n_days: 10,
                phi: 0.0,
                missing_frac: 0.0,
                seed,
                ..SynthSpec::default()
            };
            let s = generate(&spec).unwrap();
            let (mut num, mut d0, mut d1) = (0.0, 0.0, 0.0);
            for i in 0..20 {
                for t in 1..10 {
                    let a = s.truth[i][t - 1] - s.mean_path[i][t - 1];
                    let b = s.truth[i][t] - s.mean_path[i][t];
                    num += a * b;
                    d0 += a * a;
                    d1 += b * b;
                }
            }
            acc += num / (d0 * d1).sqrt();
        }
        assert!((acc / 50.0).abs() < 0.05, "{}", acc / 50.0);
    }

    #[test]
    fn long_run_variance_is_stationary() {
        let spec = SynthSpec {
            n_locations: 5,
            n_days: 200,
            missing_frac: 0.0,
            beta: vec![0.0],
            seed: 11,
            ..SynthSpec::default()
        };
        let target = (spec.sigma2 + spec.tau2) / (1.0 - spec.phi * spec.phi);
        let mut pooled = 0.0;
        let mut reps = 0.0;
        for seed in 0..20 {
            let s = generate(&SynthSpec { seed, ..spec.clone() }).unwrap();
            for row in &s.truth {
                pooled += row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                reps += 1.0;
            }
        }
        let v = pooled / reps;
        assert!((v / target - 1.0).abs() < 0.1, "{v} vs {target}");
    }
}

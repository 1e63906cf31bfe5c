//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Text,
    /// Optional input file.
    File,
    FloatList,
}

/// Every accepted key with its default. An empty default means "unset".
const KEYS: &[(&str, &str, Kind)] = &[
    ("seed", "1", Kind::Uint),
    ("data.water_level", "", Kind::File),
    ("data.precipitation", "", Kind::File),
    ("data.stations", "", Kind::File),
    ("data.metric", "geodetic", Kind::Text),
    ("data.dir", "", Kind::Text),
    ("prep.ma_window", "5", Kind::Uint),
    ("prep.idw_power", "2", Kind::Float),
    ("split.holdout_stations", "20", Kind::Uint),
    ("split.holdout_days", "5", Kind::Uint),
    ("split.seed", "", Kind::Uint),
    ("synth.n_locations", "100", Kind::Uint),
    ("synth.n_days", "20", Kind::Uint),
    ("synth.beta", "1,3", Kind::FloatList),
    ("synth.phi", "0.9", Kind::Float),
    ("synth.sigma2", "1", Kind::Float),
    ("synth.tau2", "0.1", Kind::Float),
    ("synth.lengthscale", "0.3", Kind::Float),
    ("synth.missing_frac", "0.1", Kind::Float),
    ("model.kind", "nngp", Kind::Text),
    ("model.m", "10", Kind::Uint),
    ("model.init", "stationary", Kind::Text),
    ("model.neighbors", "", Kind::Uint),
    ("prior.lengthscale_min", "0.1", Kind::Float),
    ("prior.lengthscale_max", "auto", Kind::Text),
    ("mcmc.chains", "4", Kind::Uint),
    ("mcmc.iterations", "500", Kind::Uint),
    ("mcmc.warmup", "500", Kind::Uint),
    ("mcmc.thin", "1", Kind::Uint),
    ("mcmc.adapt_target", "0.3", Kind::Float),
    ("mcmc.seed", "", Kind::Uint),
    ("predict.horizon", "", Kind::Uint),
    ("predict.seed", "", Kind::Uint),
    ("baseline.knots", "100", Kind::Uint),
    ("baseline.dense_ceiling", "500", Kind::Uint),
    ("compare.models", "nngp,gpp,gp1,gp2", Kind::Text),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, _, kind)| *kind)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = kind_of(key).ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
        if !value.is_empty() {
            check_value(key, value, kind)?;
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn raw(&self, key: &str) -> &str {
        if let Some(v) = self.values.get(key) {
            return v;
        }
        KEYS.iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, d, _)| *d)
            .unwrap_or_else(|| panic!("configuration key `{key}` is not declared"))
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn text(&self, key: &str) -> &str {
        self.raw(key)
    }

    pub fn uint(&self, key: &str) -> Result<u64> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("`{key}` = `{v}` is not a nonnegative integer")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.uint(key)? as usize)
    }

    /// An integer key that defaults to another key's value when unset.
    pub fn uint_or(&self, key: &str, fallback: &str) -> Result<u64> {
        if self.is_set(key) {
            self.uint(key)
        } else {
            self.uint(fallback)
        }
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("`{key}` = `{v}` is not a number")))
    }

    pub fn float_list(&self, key: &str) -> Result<Vec<f64>> {
        parse_list(key, self.raw(key))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.is_set(key).then(|| PathBuf::from(self.raw(key)))
    }

    /// Checks that every given input file exists.
    pub fn validate(&self) -> Result<()> {
        for (key, _, kind) in KEYS {
            if *kind == Kind::File && self.is_set(key) {
                let p = Path::new(self.raw(key));
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, format!("`{key}` does not exist")),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _, _)| (k.to_string(), self.raw(k).to_string()))
            .collect()
    }

    /// The resolved configuration as a config file.
    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("`{key}`: `{s}` is not a number")))
        })
        .collect()
}

fn check_value(key: &str, value: &str, kind: Kind) -> Result<()> {
    let ok = match kind {
        Kind::Uint => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        Kind::FloatList => parse_list(key, value).is_ok(),
        Kind::Text | Kind::File => true,
    };
    if !ok {
        return Err(Error::Config(format!("`{key}` has invalid value `{value}`")));
    }
    if key == "prior.lengthscale_max" && value != "auto" && value.parse::<f64>().is_err() {
        return Err(Error::Config("`prior.lengthscale_max` must be a number or `auto`".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_defaults() {
        let cfg = RunConfig::parse("# run\nmodel.m = 5\nsynth.beta = 0.5, 2\n\nseed=7 # trailing\n").unwrap();
        assert_eq!(cfg.usize("model.m").unwrap(), 5);
        assert_eq!(cfg.float_list("synth.beta").unwrap(), vec![0.5, 2.0]);
        assert_eq!(cfg.uint_or("mcmc.seed", "seed").unwrap(), 7);
        assert_eq!(cfg.usize("mcmc.chains").unwrap(), 4);
        assert!(!cfg.is_set("data.dir"));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::parse("model.q = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.m = ten"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just text"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("prior.lengthscale_max = big"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_and_roundtrip() {
        let mut cfg = RunConfig::parse("model.m = 5").unwrap();
        cfg.apply_override("model.m=8").unwrap();
        assert_eq!(cfg.usize("model.m").unwrap(), 8);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again.resolved(), cfg.resolved());
    }

    #[test]
    fn missing_input_file_fails_validation() {
        let cfg = RunConfig::parse("data.stations = /no/such/file.csv").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Io { .. })));
    }
}

//! Scores for predictive draws and tabulated reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict::PredictiveDraws;

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if truth.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("truth contains missing values".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// `mean|X - y| - ½ mean|X - X'|`, the second mean over all `S²` ordered
/// pairs. Computed from the sorted sample in `O(S log S)`.
pub fn crps_empirical(samples: &[f64], truth: f64) -> Result<f64> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::Invalid(format!("CRPS needs at least 2 samples, got {s}")));
    }
    let sf = s as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs_err = sorted.iter().map(|x| (x - truth).abs()).sum::<f64>() / sf;
    // Σ_{i,j} |x_i - x_j| = 2 Σ_k (2k - S - 1) x_(k), k = 1..S
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| (2.0 * (k + 1) as f64 - sf - 1.0) * x)
        .sum::<f64>()
        * 2.0
        / (sf * sf);
    Ok((abs_err - 0.5 * spread).max(0.0))
}

/// Fraction of truths inside the closed intervals.
pub fn coverage(intervals: &[(f64, f64)], truth: &[f64], level: f64) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::Invalid("no intervals to score".into()));
    }
    if intervals.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} intervals for {} truths",
            intervals.len(),
            truth.len()
        )));
    }
    if (level - 0.9).abs() > 1e-12 && (level - 0.95).abs() > 1e-12 {
        log::warn!("non-standard coverage level {level}");
    }
    let hit = intervals
        .iter()
        .zip(truth)
        .filter(|((lo, hi), t)| lo <= t && *t <= hi)
        .count();
    Ok(hit as f64 / truth.len() as f64)
}

/// Which part of the held-out data a target belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Held-out stations on training days.
    Space,
    /// Held-out stations on forecast days.
    SpaceTime,
    /// Training stations on forecast days.
    Time,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Space, Scenario::SpaceTime, Scenario::Time];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Space => "space",
            Scenario::SpaceTime => "space-time",
            Scenario::Time => "time",
        }
    }

    pub fn classify(held_out_station: bool, future_day: bool) -> Option<Self> {
        match (held_out_station, future_day) {
            (true, false) => Some(Scenario::Space),
            (true, true) => Some(Scenario::SpaceTime),
            (false, true) => Some(Scenario::Time),
            (false, false) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScores {
    pub count: usize,
    pub rmse: f64,
    pub mae: f64,
    pub coverage90: f64,
    pub coverage95: f64,
    pub crps_mean: f64,
    pub crps_sum: f64,
}

impl ScenarioScores {
    /// Scores a set of predictive draws against truths.
    pub fn compute(draws: &[&PredictiveDraws], truth: &[f64]) -> Result<Self> {
        let means: Vec<f64> = draws.iter().map(|d| d.summary.mean).collect();
        let i90: Vec<(f64, f64)> = draws.iter().map(|d| (d.summary.q5, d.summary.q95)).collect();
        let i95: Vec<(f64, f64)> = draws.iter().map(|d| (d.summary.q2_5, d.summary.q97_5)).collect();
        let crps = draws
            .iter()
            .zip(truth)
            .map(|(d, &t)| crps_empirical(&d.samples, t))
            .collect::<Result<Vec<f64>>>()?;
        let crps_sum: f64 = crps.iter().sum();
        Ok(ScenarioScores {
            count: draws.len(),
            rmse: rmse(&means, truth)?,
            mae: mae(&means, truth)?,
            coverage90: coverage(&i90, truth, 0.9)?,
            coverage95: coverage(&i95, truth, 0.95)?,
            crps_mean: crps_sum / draws.len() as f64,
            crps_sum,
        })
    }

    fn rows(&self) -> [(&'static str, f64); 7] {
        [
            ("count", self.count as f64),
            ("rmse", self.rmse),
            ("mae", self.mae),
            ("coverage90", self.coverage90),
            ("coverage95", self.coverage95),
            ("crps_mean", self.crps_mean),
            ("crps_sum", self.crps_sum),
        ]
    }
}

/// Scores per model and scenario.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: BTreeMap<String, BTreeMap<Scenario, ScenarioScores>>,
}

impl MetricsReport {
    pub fn insert(&mut self, model: &str, scenario: Scenario, scores: ScenarioScores) {
        self.entries.entry(model.to_string()).or_default().insert(scenario, scores);
    }

    pub fn get(&self, model: &str, scenario: Scenario) -> Option<&ScenarioScores> {
        self.entries.get(model).and_then(|m| m.get(&scenario))
    }

    /// Long-format `model,scenario,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,scenario,metric,value\n");
        for (model, per) in &self.entries {
            for (scenario, scores) in per {
                for (name, v) in scores.rows() {
                    out.push_str(&format!("{model},{},{name},{v}\n", scenario.as_str()));
                }
            }
        }
        out
    }

    /// One row per model: coverage, CRPS, RMSE and MAE by scenario.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}", "model");
        for s in Scenario::ALL {
            out.push_str(&format!(
                " | {:^47}",
                format!("{} (n)", s.as_str())
            ));
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", ""));
        for _ in Scenario::ALL {
            out.push_str(&format!(
                " | {:>5} {:>6} {:>6} {:>8} {:>8} {:>8}",
                "n", "cov90", "cov95", "crps", "rmse", "mae"
            ));
        }
        out.push('\n');
        for (model, per) in &self.entries {
            out.push_str(&format!("{model:<8}"));
            for s in Scenario::ALL {
                match per.get(&s) {
                    Some(x) => out.push_str(&format!(
                        " | {:>5} {:>6.1} {:>6.1} {:>8.4} {:>8.4} {:>8.4}",
                        x.count,
                        100.0 * x.coverage90,
                        100.0 * x.coverage95,
                        x.crps_mean,
                        x.rmse,
                        x.mae
                    )),
                    None => out.push_str(&format!(" | {:>47}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, csv_path: &Path, table_path: &Path) -> Result<()> {
        for (path, body) in [(csv_path, self.to_csv()), (table_path, self.to_table())] {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn point_error_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[-1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mae(&[-1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2f64.sqrt());
        assert_eq!(mae(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_empirical(&[1.5, 1.5, 1.5], 1.5).unwrap(), 0.0);
        assert_eq!(crps_empirical(&[4.0, 4.0], 1.0).unwrap(), 3.0);
        assert_eq!(crps_empirical(&[0.0, 2.0], 0.0).unwrap(), 0.5);
        assert!(crps_empirical(&[1.0], 0.0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let iv = [(0.0, 1.0), (2.0, 3.0)];
        assert_eq!(coverage(&iv, &[0.0, 3.0], 0.95).unwrap(), 1.0);
        assert_eq!(coverage(&iv, &[-1.0, 4.0], 0.95).unwrap(), 0.0);
        assert_eq!(coverage(&iv, &[0.5, 4.0], 0.9).unwrap(), 0.5);
    }

    fn crps_pairs(samples: &[f64], y: f64) -> f64 {
        let s = samples.len() as f64;
        let a = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / s;
        let mut b = 0.0;
        for x in samples {
            for z in samples {
                b += (x - z).abs();
            }
        }
        a - 0.5 * b / (s * s)
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let r = rmse(&p, &t).unwrap();
            let m = mae(&p, &t).unwrap();
            prop_assert!(m >= 0.0 && r >= m - 1e-12);
        }

        #[test]
        fn crps_matches_pairwise_and_is_permutation_invariant(
            mut v in prop::collection::vec(-10.0f64..10.0, 2..60),
            y in -12.0f64..12.0,
        ) {
            let c = crps_empirical(&v, y).unwrap();
            prop_assert!(c >= 0.0);
            prop_assert!((c - crps_pairs(&v, y)).abs() < 1e-9);
            v.reverse();
            prop_assert!((crps_empirical(&v, y).unwrap() - c).abs() < 1e-12);
        }

        #[test]
        fn widening_never_reduces_coverage(
            v in prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0, -8.0f64..8.0), 1..40),
            widen in 0.0f64..2.0,
        ) {
            let iv: Vec<(f64, f64)> = v.iter().map(|(c, w, _)| (c - w, c + w)).collect();
            let wide: Vec<(f64, f64)> = iv.iter().map(|(a, b)| (a - widen, b + widen)).collect();
            let t: Vec<f64> = v.iter().map(|x| x.2).collect();
            prop_assert!(coverage(&wide, &t, 0.95).unwrap() >= coverage(&iv, &t, 0.95).unwrap());
        }
    }
}

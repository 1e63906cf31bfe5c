//! Rank-normalized split-R̂ and bulk effective sample size.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Convergence summary for one scalar quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDiagnostic {
    pub name: String,
    /// `None` for a single chain or a constant quantity.
    pub rhat: Option<f64>,
    /// `None` when all draws are identical.
    pub ess_bulk: Option<f64>,
    pub degenerate: bool,
}

impl ParamDiagnostic {
    /// R̂ above the conventional 1.1 alarm level.
    pub fn flagged(&self) -> bool {
        self.degenerate || self.rhat.is_some_and(|r| r > 1.1)
    }
}

/// Diagnostics for one quantity given `chains[c][iteration]`.
pub fn diagnose(name: &str, chains: &[Vec<f64>]) -> ParamDiagnostic {
    let mut out = ParamDiagnostic {
        name: name.to_string(),
        rhat: None,
        ess_bulk: None,
        degenerate: false,
    };
    let first = chains.iter().flat_map(|c| c.first()).next().copied();
    let constant = match first {
        None => true,
        Some(v) => chains.iter().flatten().all(|&x| x == v),
    };
    if constant {
        log::warn!("{name}: all draws identical; R-hat and ESS are undefined");
        out.degenerate = true;
        return out;
    }
    let split = split_chains(chains);
    if split.is_empty() || split[0].len() < 2 {
        out.degenerate = true;
        return out;
    }
    let z = rank_normalize(&split);
    if chains.len() >= 2 {
        out.rhat = Some(rhat(&z));
    } else {
        log::warn!("{name}: R-hat needs at least two chains");
    }
    out.ess_bulk = Some(ess(&z));
    out
}

fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let half = n / 2;
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(c[..half].to_vec());
        out.push(c[n - half..n].to_vec());
    }
    out
}

fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize)> = chains.iter().flatten().copied().zip(0..).collect();
    let s = pooled.len();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &pooled[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut k = 0;
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| {
                    let r = ranks[k];
                    k += 1;
                    normal.inverse_cdf((r - 0.375) / (s as f64 + 0.25))
                })
                .collect()
        })
        .collect()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let b = n * mean_var(&means).1;
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone positive sequence.
fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len();
    let nf = n as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    let b_over_n = if chains.len() > 1 {
        mean_var(&stats.iter().map(|s| s.0).collect::<Vec<_>>()).1
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    let rho = |t: usize| -> f64 {
        let mean_acov = chains.iter().map(|c| autocov(c, t)).sum::<f64>() / m;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        prev_pair = pair;
        sum_pairs += pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / (m * nf).log10().max(1.0));
    m * nf / tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_chains_are_degenerate() {
        let d = diagnose("c", &[vec![1.0; 50], vec![1.0; 50]]);
        assert!(d.degenerate);
        assert!(d.rhat.is_none() && d.ess_bulk.is_none());
    }

    #[test]
    fn iid_chains_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..500).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let d = diagnose("x", &chains);
        assert!(d.rhat.unwrap() < 1.01, "{:?}", d.rhat);
        let ess = d.ess_bulk.unwrap();
        assert!(ess > 1200.0 && ess < 3000.0, "{ess}");
        assert!(!d.flagged());
    }

    #[test]
    fn trending_chain_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                (0..500)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + if c == 0 { i as f64 * 0.02 } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let d = diagnose("trend", &chains);
        assert!(d.rhat.unwrap() > 1.1, "{:?}", d.rhat);
        assert!(d.flagged());
    }

    #[test]
    fn single_chain_omits_rhat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let d = diagnose("one", &[c]);
        assert!(d.rhat.is_none());
        assert!(d.ess_bulk.is_some());
    }
}

//! Vecchia / nearest-neighbor factorization of a spatial Gaussian law.
//!
//! For every location `i` in model order the factor stores weights `a_i`
//! over its neighbor set `N(i)` and a conditional variance `d_i` so that
//!
//! ```text
//! w_i | w_N(i) ~ N(a_iᵀ w_N(i), d_i)
//! ```
//!
//! The product of these conditionals is a proper joint density whose
//! precision is `(I - A)ᵀ D⁻¹ (I - A)`, which is what the imputation and
//! likelihood code rely on through [`SpatialLaw`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{CovarianceFunction, ExponentialKernel, Nugget};
use crate::error::{Error, Result};
use crate::law::SpatialLaw;
use crate::linalg::{self, LANES, LN_2PI};
use crate::spatial::{Location, SpatialDomain};

/// Floor applied to conditional variances.
pub const COND_VAR_FLOOR: f64 = 1e-12;

/// Which covariance the factor approximates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorMode {
    /// The spatial field alone, `C`.
    Latent,
    /// The observed response, `C + τ² I`.
    Response(Nugget),
}

impl FactorMode {
    fn tau2(self) -> f64 {
        match self {
            FactorMode::Latent => 0.0,
            FactorMode::Response(n) => n.tau2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NngpFactor<'d, K = ExponentialKernel> {
    domain: &'d SpatialDomain,
    kernel: K,
    mode: FactorMode,
    /// Flattened `a_i`, location `i` occupying `offsets[i]..offsets[i + 1]`.
    weights: Vec<f64>,
    offsets: Vec<usize>,
    cond_vars: Vec<f64>,
    /// Σ log d_i.
    log_det: f64,
}

/// Builds the neighbor factorization of `kernel` (plus nugget in response mode) over `domain`.
pub fn factorize<'d, K: CovarianceFunction>(
    domain: &'d SpatialDomain,
    kernel: &K,
    mode: FactorMode,
) -> Result<NngpFactor<'d, K>> {
    let n = domain.len();
    let tau2 = mode.tau2();
    let var0 = kernel.variance() + tau2;
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for i in 0..n {
        offsets.push(offsets[i] + domain.neighbors(i).len());
    }
    let mut weights = vec![0.0; offsets[n]];
    let mut cond_vars = vec![0.0; n];
    let cov: Vec<f64> = domain.lags().iter().map(|&d| kernel.eval(d)).collect();
    for i in 0..n {
        for (slot, &q) in weights[offsets[i]..offsets[i + 1]].iter_mut().zip(domain.neighbor_lags(i)) {
            *slot = cov[q as usize];
        }
    }
    let packed = |i: usize, buf: &mut Vec<f64>| {
        buf.clear();
        buf.extend(domain.pair_lags(i).iter().map(|&q| cov[q as usize]));
    };
    let singular = |i: usize| Error::Numerical(format!("neighbor covariance of location {i} is not positive definite"));
    // explained[i] = cᵀ C⁻¹ c, with weights[i] solved in place to C⁻¹ c
    let mut explained = vec![0.0; n];
    let mut bufs: [Vec<f64>; LANES] = Default::default();
    let mut i = 0;
    while i < n {
        let k = domain.neighbors(i).len();
        if k > 0 && i + LANES <= n && (i..i + LANES).all(|j| domain.neighbors(j).len() == k) {
            for (s, buf) in bufs.iter_mut().enumerate() {
                packed(i + s, buf);
            }
            let mut lanes = weights[offsets[i]..offsets[i + LANES]].chunks_exact_mut(k);
            let rhs: [&mut [f64]; LANES] = std::array::from_fn(|_| lanes.next().expect("one lane per location"));
            let q = linalg::packed_spd_solve_batch(std::array::from_fn(|s| bufs[s].as_slice()), var0, rhs)
                .ok_or_else(|| singular(i))?;
            explained[i..i + LANES].copy_from_slice(&q);
            i += LANES;
        } else {
            if k > 0 {
                packed(i, &mut bufs[0]);
                explained[i] = linalg::packed_spd_solve(&bufs[0], var0, &mut weights[offsets[i]..offsets[i + 1]])
                    .ok_or_else(|| singular(i))?;
            }
            i += 1;
        }
    }
    for (i, e) in explained.into_iter().enumerate() {
        // d_i = var0 - cᵀ C⁻¹ c
        let mut d = var0 - e;
        if d < COND_VAR_FLOOR {
            log::warn!("conditional variance of location {i} clamped from {d:e} to {COND_VAR_FLOOR:e}");
            d = COND_VAR_FLOOR;
        }
        cond_vars[i] = d;
    }
    let log_det = cond_vars.iter().map(|d| d.ln()).sum();
    Ok(NngpFactor {
        domain,
        kernel: kernel.clone(),
        mode,
        weights,
        offsets,
        cond_vars,
        log_det,
    })
}

impl<'d, K: CovarianceFunction> NngpFactor<'d, K> {
    pub fn domain(&self) -> &'d SpatialDomain {
        self.domain
    }

    pub fn kernel(&self) -> &K {
        &self.kernel
    }

    pub fn mode(&self) -> FactorMode {
        self.mode
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn cond_var(&self, i: usize) -> f64 {
        self.cond_vars[i]
    }

    pub fn cond_vars(&self) -> &[f64] {
        &self.cond_vars
    }

    /// `r_i - a_iᵀ r_N(i)`.
    #[inline]
    fn innovation(&self, i: usize, r: &[f64]) -> f64 {
        let nb = self.domain.neighbors(i);
        let a = self.weights(i);
        let mut u = r[i];
        for (w, &j) in a.iter().zip(nb) {
            u -= w * r[j];
        }
        u
    }

    /// Σ_i log N(w_i; mean_i + a_iᵀ(w_N(i) - mean_N(i)), d_i).
    pub fn log_density(&self, w: &[f64], mean: &[f64]) -> Result<f64> {
        let n = self.domain.len();
        if w.len() != n || mean.len() != n {
            return Err(Error::Usage(format!(
                "log_density expects vectors of length {n}, got {} and {}",
                w.len(),
                mean.len()
            )));
        }
        let r: Vec<f64> = w.iter().zip(mean).map(|(a, b)| a - b).collect();
        Ok(self.log_density_scaled(&r, 1.0))
    }

    /// Sequential draw `w_i = mean_i + a_iᵀ(w_N(i) - mean_N(i)) + √d_i z_i`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let n = self.domain.len();
        if mean.len() != n {
            return Err(Error::Usage(format!("mean must have length {n}")));
        }
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let r = self.residual_from_normals(&z);
        Ok(r.iter().zip(mean).map(|(a, b)| a + b).collect())
    }

    /// Zero-mean field built from a fixed vector of standard normals.
    pub fn residual_from_normals(&self, z: &[f64]) -> Vec<f64> {
        let n = self.domain.len();
        let mut r = vec![0.0; n];
        for i in 0..n {
            let nb = self.domain.neighbors(i);
            let pred: f64 = self.weights(i).iter().zip(nb).map(|(w, &j)| w * r[j]).sum();
            r[i] = pred + self.cond_vars[i].sqrt() * z[i];
        }
        r
    }
}

impl<K: CovarianceFunction> SpatialLaw for NngpFactor<'_, K> {
    fn len(&self) -> usize {
        self.domain.len()
    }

    fn log_density_scaled(&self, r: &[f64], scale: f64) -> f64 {
        let mut quad = 0.0;
        for i in 0..r.len() {
            let u = self.innovation(i, r);
            quad += u * u / self.cond_vars[i];
        }
        -0.5 * (r.len() as f64 * (LN_2PI + scale.ln()) + self.log_det + quad / scale)
    }

    fn log_density_days(&self, r: &DMatrix<f64>, first_scale: f64) -> f64 {
        let (n, days) = r.shape();
        const B: usize = 8;
        const CHUNK: usize = 2 * B;
        // chunks of days held as one contiguous series per location; the
        // last chunk is zero padded, which adds nothing to the sums
        let mut quad = vec![0.0; days.div_ceil(CHUNK) * CHUNK];
        let mut rt = vec![[0.0; CHUNK]; n];
        for (c, quad) in quad.chunks_exact_mut(CHUNK).enumerate() {
            let c0 = c * CHUNK;
            let len = CHUNK.min(days - c0);
            if len < CHUNK {
                rt.fill([0.0; CHUNK]);
            }
            for (s, col) in r.as_slice()[c0 * n..(c0 + len) * n].chunks_exact(n).enumerate() {
                for (dst, &v) in rt.iter_mut().zip(col) {
                    dst[s] = v;
                }
            }
            for i in 0..n {
                let (w, nb) = (self.weights(i), self.domain.neighbors(i));
                let inv = 1.0 / self.cond_vars[i];
                // blocks of days held in registers across the neighbor sweep
                for t0 in (0..CHUNK).step_by(B) {
                    let mut u: [f64; B] = rt[i][t0..t0 + B].try_into().expect("block");
                    for (wj, &j) in w.iter().zip(nb) {
                        let rj = &rt[j][t0..t0 + B];
                        for b in 0..B {
                            u[b] -= wj * rj[b];
                        }
                    }
                    for b in 0..B {
                        quad[t0 + b] += u[b] * u[b] * inv;
                    }
                }
            }
        }
        let quad = &quad[..days];
        let total = quad[0] / first_scale + quad[1..].iter().sum::<f64>();
        -0.5 * ((n * days) as f64 * LN_2PI + n as f64 * first_scale.ln() + days as f64 * self.log_det + total)
    }

    fn precision_pair(&self, s: usize, r: &[f64]) -> (f64, f64) {
        let d = self.cond_vars[s];
        let mut qss = 1.0 / d;
        let mut qr = self.innovation(s, r) / d;
        for &(j, k) in self.domain.children(s) {
            let l = -self.weights(j)[k];
            let dj = self.cond_vars[j];
            qss += l * l / dj;
            qr += l * self.innovation(j, r) / dj;
        }
        (qss, qr)
    }

    fn sample_residual(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let z: Vec<f64> = (0..self.domain.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.residual_from_normals(&z)
    }

    fn covariance(&self) -> DMatrix<f64> {
        // columns of B⁻¹ D^½ are the fields generated by unit normals
        let n = self.domain.len();
        let mut m = DMatrix::zeros(n, n);
        let mut z = vec![0.0; n];
        for j in 0..n {
            z[j] = 1.0;
            let col = self.residual_from_normals(&z);
            m.column_mut(j).copy_from_slice(&col);
            z[j] = 0.0;
        }
        &m * m.transpose()
    }
}

/// Conditional law of a target given a set of domain points.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingLaw {
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub variance: f64,
}

/// Distance below which a target is treated as coinciding with a station.
pub const COINCIDENT_TOL: f64 = 1e-9;

/// Simple-kriging weights for `target` from its `m` nearest stations.
///
/// Out-of-sample targets have no ordering constraint, so all stations are
/// candidates. In response mode the neighbor block and the target's own
/// variance both carry the nugget.
pub fn krige_weights<K: CovarianceFunction>(
    domain: &SpatialDomain,
    target: &Location,
    kernel: &K,
    mode: FactorMode,
    m: usize,
) -> Result<KrigingLaw> {
    let near = domain.nearest(target, m.max(1));
    if let Some(&(j, d)) = near.first() {
        if d < COINCIDENT_TOL {
            return Ok(KrigingLaw {
                neighbors: vec![j],
                weights: vec![1.0],
                variance: 0.0,
            });
        }
    }
    let tau2 = mode.tau2();
    let var0 = kernel.variance() + tau2;
    let k = near.len();
    let locs = domain.locations();
    let mut c_nn = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..a {
            c_nn[a * k + b] = kernel.eval(domain.distance(&locs[near[a].0], &locs[near[b].0]));
        }
        c_nn[a * k + a] = var0;
    }
    if !linalg::cholesky_in_place(&mut c_nn, k) {
        return Err(Error::Numerical("kriging neighbor covariance is singular".into()));
    }
    let c: Vec<f64> = near.iter().map(|&(_, d)| kernel.eval(d)).collect();
    let mut w = c.clone();
    linalg::cholesky_solve_in_place(&c_nn, k, &mut w);
    let variance = (var0 - linalg::dot(&w, &c)).max(0.0);
    Ok(KrigingLaw {
        neighbors: near.into_iter().map(|(j, _)| j).collect(),
        weights: w,
        variance,
    })
}

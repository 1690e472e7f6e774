//! Spatially ε-correlated Brownian increments on a finite set of locations.
//!
//! Space-time white noise convolved with an ε-rescaled radial mollifier gives,
//! at each location, a standard Brownian motion; two locations further apart
//! than 2ε are independent. The covariance of unit-time increments is
//!
//! ```text
//! Σ(x, y) = C_ρ ∫ ρ(w) ρ(w − h) dw,   h = (y − x)/ε,   C_ρ = (∫ ρ²)⁻¹.
//! ```

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Purpose};

#[derive(Debug, thiserror::Error)]
pub enum NoiseError {
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("space dimension {0} not supported (1..=3)")]
    BadDimension(usize),
    #[error("location array length {len} is not a multiple of dimension {dim}")]
    BadLocations { len: usize, dim: usize },
    #[error("covariance quadrature did not reach relative tolerance {tol:e} (last change {change:e})")]
    Quadrature { tol: f64, change: f64 },
    #[error("covariance matrix not positive definite even with jitter {0:e}")]
    NotPositiveDefinite(f64),
    #[error("time step must be nonnegative and finite, got {0}")]
    BadTimeStep(f64),
    #[error("verification needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
}

/// Radial profile supported in the unit ball.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MollifierProfile {
    /// `exp(1 − 1/(1 − r²))`.
    Bump,
    /// `(1 − r²)²`.
    Polynomial,
}

impl MollifierProfile {
    pub fn value(self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        let s = 1.0 - r * r;
        match self {
            MollifierProfile::Bump => (1.0 - 1.0 / s).exp(),
            MollifierProfile::Polynomial => s * s,
        }
    }

    /// Radial derivative `dρ/dr`.
    pub fn derivative(self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        let s = 1.0 - r * r;
        match self {
            MollifierProfile::Bump => -2.0 * r / (s * s) * (1.0 - 1.0 / s).exp(),
            MollifierProfile::Polynomial => -4.0 * r * s,
        }
    }
}

/// Mollifier with its normalization constants for a given dimension.
#[derive(Clone, Debug)]
pub struct Mollifier {
    pub profile: MollifierProfile,
    pub dim: usize,
    /// `(∫ρ²)⁻¹`.
    pub c_rho: f64,
    /// `C_ρ ∫|∇ρ|²`; bounds `2(1 − Σ(x,y)) ≤ c_check |x − y|²/ε²`.
    pub c_check: f64,
}

const QUAD_TOL: f64 = 1e-8;

fn sphere_area(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 4.0 * std::f64::consts::PI,
    }
}

/// Adaptive trapezoid on `[a, b]` with nested doubling.
fn trapezoid_1d(f: impl Fn(f64) -> f64, a: f64, b: f64) -> Result<f64, NoiseError> {
    try_trapezoid_1d(|x| Ok(f(x)), a, b)
}

fn try_trapezoid_1d(f: impl Fn(f64) -> Result<f64, NoiseError>, a: f64, b: f64) -> Result<f64, NoiseError> {
    let mut n = 8usize;
    let mut h = (b - a) / n as f64;
    let mut sum = 0.5 * (f(a)? + f(b)?);
    for i in 1..n {
        sum += f(a + i as f64 * h)?;
    }
    let mut prev = sum * h;
    let mut change = f64::INFINITY;
    for _ in 0..22 {
        let mut mids = 0.0;
        for i in 0..n {
            mids += f(a + (i as f64 + 0.5) * h)?;
        }
        sum += mids;
        n *= 2;
        h *= 0.5;
        let cur = sum * h;
        change = (cur - prev).abs();
        if change <= QUAD_TOL * cur.abs().max(1e-300) || change == 0.0 {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(NoiseError::Quadrature { tol: QUAD_TOL, change })
}

impl Mollifier {
    pub fn new(profile: MollifierProfile, dim: usize) -> Result<Self, NoiseError> {
        if !(1..=3).contains(&dim) {
            return Err(NoiseError::BadDimension(dim));
        }
        let p = dim as i32 - 1;
        let area = sphere_area(dim);
        let sq = area * trapezoid_1d(|r| profile.value(r).powi(2) * r.powi(p), 0.0, 1.0)?;
        let grad = area * trapezoid_1d(|r| profile.derivative(r).powi(2) * r.powi(p), 0.0, 1.0)?;
        Ok(Self { profile, dim, c_rho: 1.0 / sq, c_check: grad / sq })
    }

    /// `C_ρ ∫ ρ(w) ρ(w − h) dw` for a rescaled offset `h`.
    ///
    /// The kernel is radial, so `h` is rotated onto the first axis. The mirror `w₁ ↦ |h| − w₁` swaps the two
    /// factors, which leaves `2 ∫_{|h|/2}^{1}` over slabs where `|w| ≤ 1` is the binding constraint; each slab
    /// is a ball of radius `√(1 − w₁²)` in the remaining coordinates.
    pub fn correlation(&self, h: &[f64]) -> Result<f64, NoiseError> {
        let dist2: f64 = h.iter().map(|v| v * v).sum();
        if dist2 == 0.0 {
            return Ok(1.0);
        }
        if dist2 >= 4.0 {
            return Ok(0.0);
        }
        let r = dist2.sqrt();
        let rho = |w1: f64, s: f64| {
            self.profile.value((w1 * w1 + s * s).sqrt()) * self.profile.value(((w1 - r).powi(2) + s * s).sqrt())
        };
        let slab = |w1: f64| -> Result<f64, NoiseError> {
            let b = (1.0 - w1 * w1).max(0.0).sqrt();
            match self.dim {
                1 => Ok(rho(w1, 0.0)),
                2 => Ok(2.0 * trapezoid_1d(|s| rho(w1, s), 0.0, b)?),
                _ => Ok(2.0 * std::f64::consts::PI * trapezoid_1d(|s| rho(w1, s) * s, 0.0, b)?),
            }
        };
        Ok(2.0 * self.c_rho * try_trapezoid_1d(slab, 0.5 * r, 1.0)?)
    }
}

/// Stored Cholesky factor of the location covariance.
#[derive(Clone, Debug)]
pub enum Factor {
    /// All locations are pairwise independent.
    Identity,
    /// Lower-triangular rows with exact zeros dropped.
    Sparse(Vec<Vec<(usize, f64)>>),
}

/// Noise field on fixed locations, with one independent copy per orientation.
#[derive(Debug)]
pub struct CorrelatedNoiseField {
    pub mollifier: Mollifier,
    pub epsilon: f64,
    pub dim: usize,
    pub orientations: usize,
    /// Row-major `P × d`.
    pub locations: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub factor: Factor,
    /// Jitter that was added to the diagonal before factorization (0 if none).
    pub jitter: f64,
}

/// Default correlation length `N^{-1/d}/3`.
pub fn default_epsilon(n_locations: usize, dim: usize) -> f64 {
    (n_locations as f64).powf(-1.0 / dim as f64) / 3.0
}

/// Correlation for a rescaled offset, memoized by distance (the kernel is radial).
fn cached_correlation(moll: &Mollifier, cache: &mut HashMap<u64, f64>, h: &[f64]) -> Result<f64, NoiseError> {
    let r = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if let Some(v) = cache.get(&r.to_bits()) {
        return Ok(*v);
    }
    let mut canonical = vec![0.0; h.len()];
    canonical[0] = r;
    let v = moll.correlation(&canonical)?;
    cache.insert(r.to_bits(), v);
    Ok(v)
}

/// Covariance of unit-time increments between `x` and `y`.
pub fn covariance(x: &[f64], y: &[f64], epsilon: f64, mollifier: &Mollifier) -> Result<f64, NoiseError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(NoiseError::BadEpsilon(epsilon));
    }
    let r = x.iter().zip(y).map(|(a, b)| ((b - a) / epsilon).powi(2)).sum::<f64>().sqrt();
    let mut h = vec![0.0; x.len()];
    h[0] = r;
    mollifier.correlation(&h)
}

/// Builds the covariance on `locations` (row-major, `dim` columns) and factors it.
pub fn build_field(
    locations: &[f64],
    dim: usize,
    epsilon: f64,
    profile: MollifierProfile,
    orientations: usize,
) -> Result<CorrelatedNoiseField, NoiseError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(NoiseError::BadEpsilon(epsilon));
    }
    if dim == 0 || locations.len() % dim != 0 {
        return Err(NoiseError::BadLocations { len: locations.len(), dim });
    }
    let mollifier = Mollifier::new(profile, dim)?;
    let p = locations.len() / dim;
    let mut cache = HashMap::new();
    let mut cov = DMatrix::<f64>::identity(p, p);
    let mut off_diagonal = false;
    for i in 0..p {
        for j in 0..i {
            let h: Vec<f64> = (0..dim).map(|a| (locations[j * dim + a] - locations[i * dim + a]) / epsilon).collect();
            let v = cached_correlation(&mollifier, &mut cache, &h)?;
            if v != 0.0 {
                off_diagonal = true;
            }
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let (factor, jitter) = if off_diagonal { factorize(&cov)? } else { (Factor::Identity, 0.0) };
    Ok(CorrelatedNoiseField {
        mollifier,
        epsilon,
        dim,
        orientations,
        locations: locations.to_vec(),
        covariance: cov,
        factor,
        jitter,
    })
}

fn factorize(cov: &DMatrix<f64>) -> Result<(Factor, f64), NoiseError> {
    let p = cov.nrows();
    let mut jitter = 0.0;
    loop {
        let mut m = cov.clone();
        for i in 0..p {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            let l = ch.l();
            let rows =
                (0..p).map(|i| (0..=i).filter(|&j| l[(i, j)] != 0.0).map(|j| (j, l[(i, j)])).collect()).collect();
            return Ok((Factor::Sparse(rows), jitter));
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > 1e-8 {
            return Err(NoiseError::NotPositiveDefinite(jitter / 10.0));
        }
    }
}

impl CorrelatedNoiseField {
    pub fn n_locations(&self) -> usize {
        self.locations.len() / self.dim
    }

    /// Writes `sqrt(dt) G z` for `z` drawn from `rng` into column `beta` of `out`.
    fn fill_component(&self, scale: f64, rng: &mut impl Rng, beta: usize, out: &mut [f64]) {
        let p = self.n_locations();
        let b = self.orientations;
        match &self.factor {
            Factor::Identity => {
                for i in 0..p {
                    let z: f64 = rng.sample(StandardNormal);
                    out[i * b + beta] = scale * z;
                }
            }
            Factor::Sparse(rows) => {
                let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                for (i, row) in rows.iter().enumerate() {
                    let s: f64 = row.iter().map(|&(j, g)| g * z[j]).sum();
                    out[i * b + beta] = scale * s;
                }
            }
        }
    }

    /// Increments for column `k` at step `n`, row-major `P × B`.
    pub fn sample_increments(&self, dt: f64, k: u64, n: u64, seed: u64) -> Result<Vec<f64>, NoiseError> {
        let mut out = vec![0.0; self.n_locations() * self.orientations];
        self.sample_increments_into(dt, k, n, seed, &mut out)?;
        Ok(out)
    }

    pub fn sample_increments_into(
        &self,
        dt: f64,
        k: u64,
        n: u64,
        seed: u64,
        out: &mut [f64],
    ) -> Result<(), NoiseError> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(NoiseError::BadTimeStep(dt));
        }
        let scale = dt.sqrt();
        for beta in 0..self.orientations {
            let mut rng = stream(seed, Purpose::Noise, k, n, beta as u64);
            self.fill_component(scale, &mut rng, beta, out);
        }
        Ok(())
    }

    /// Splits the step-`n` increment of length `dt` into `2^level` consecutive
    /// sub-increments by Brownian bridge refinement.
    ///
    /// The sub-increments sum to the level-0 increment, so runs at `dt` and
    /// `dt / 2^level` are driven by the same Brownian path.
    pub fn sample_refined_into(
        &self,
        dt: f64,
        level: u32,
        k: u64,
        n: u64,
        seed: u64,
        out: &mut [Vec<f64>],
    ) -> Result<(), NoiseError> {
        let len = self.n_locations() * self.orientations;
        debug_assert_eq!(out.len(), 1 << level);
        self.sample_increments_into(dt, k, n, seed, &mut out[0])?;
        let mut parts = 1usize;
        let mut parent_dt = dt;
        let mut bridge = vec![0.0; len];
        let mut parent = vec![0.0; len];
        for l in 0..level {
            let scale = 0.5 * parent_dt.sqrt();
            // Reverse order keeps unprocessed parents (indices < idx) intact.
            for idx in (0..parts).rev() {
                let heap = (1u64 << l) + idx as u64;
                for beta in 0..self.orientations {
                    let mut rng = stream(seed, Purpose::Bridge, k, n, (heap << 8) | beta as u64);
                    self.fill_component(1.0, &mut rng, beta, &mut bridge);
                }
                parent.copy_from_slice(&out[idx]);
                for i in 0..len {
                    let half = 0.5 * parent[i];
                    let b = scale * bridge[i];
                    out[2 * idx][i] = half + b;
                    out[2 * idx + 1][i] = half - b;
                }
            }
            parts *= 2;
            parent_dt *= 0.5;
        }
        Ok(())
    }
}

/// Summary of an empirical check of the increment statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseStatistics {
    pub n_samples: usize,
    /// Largest `|Σ̂ − Σ|` over all entries (per unit time).
    pub max_cov_error: f64,
    /// Largest `|Σ̂ − Σ| / se` over all entries.
    pub max_cov_zscore: f64,
    /// Number of entries with `|Σ̂ − Σ| > 3 se`.
    pub entries_beyond_3se: usize,
    pub n_entries: usize,
    pub min_same_point_var: f64,
    pub max_same_point_var: f64,
    /// Largest `|corr|` over pairs separated by more than 2ε.
    pub max_far_corr: f64,
    /// Empirical variance of `ΔW(x) − ΔW(y)` stays under `c_check |x−y|²/ε² dt`
    /// (with a 3-standard-error allowance) for all pairs.
    pub qv_ratio_bound_ok: bool,
    /// Largest `|1 − Σ̂ ... |` mismatch between `2(1 − Σ)` and the quadratic variation.
    pub max_qv_error: f64,
}

/// Draws `n_samples` increments and compares them with the analytic covariance.
pub fn verify_statistics(
    field: &CorrelatedNoiseField,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<NoiseStatistics, NoiseError> {
    if n_samples < 10_000 {
        return Err(NoiseError::TooFewSamples { min: 10_000, got: n_samples });
    }
    let p = field.n_locations();
    let b = field.orientations;
    let mut sum = vec![0.0; p * p];
    let mut buf = vec![0.0; p * b];
    for n in 0..n_samples {
        field.sample_increments_into(dt, 0, n as u64, seed, &mut buf)?;
        for i in 0..p {
            let xi = buf[i * b];
            for j in 0..=i {
                sum[i * p + j] += xi * buf[j * b];
            }
        }
    }
    let ns = n_samples as f64;
    let mut stats = NoiseStatistics {
        n_samples,
        max_cov_error: 0.0,
        max_cov_zscore: 0.0,
        entries_beyond_3se: 0,
        n_entries: p * (p + 1) / 2,
        min_same_point_var: f64::INFINITY,
        max_same_point_var: f64::NEG_INFINITY,
        max_far_corr: 0.0,
        qv_ratio_bound_ok: true,
        max_qv_error: 0.0,
    };
    let emp = |i: usize, j: usize| sum[i.max(j) * p + i.min(j)] / (ns * dt);
    let d = field.dim;
    for i in 0..p {
        for j in 0..=i {
            let s = field.covariance[(i, j)];
            let e = emp(i, j);
            let sii = field.covariance[(i, i)];
            let sjj = field.covariance[(j, j)];
            let se = ((sii * sjj + s * s) / ns).sqrt();
            let err = (e - s).abs();
            stats.max_cov_error = stats.max_cov_error.max(err);
            let z = err / se;
            stats.max_cov_zscore = stats.max_cov_zscore.max(z);
            if z > 3.0 {
                stats.entries_beyond_3se += 1;
            }
            if i == j {
                stats.min_same_point_var = stats.min_same_point_var.min(e);
                stats.max_same_point_var = stats.max_same_point_var.max(e);
                continue;
            }
            let dist2: f64 = (0..d).map(|a| (field.locations[i * d + a] - field.locations[j * d + a]).powi(2)).sum();
            let corr = e / (emp(i, i) * emp(j, j)).sqrt();
            if dist2.sqrt() > 2.0 * field.epsilon {
                stats.max_far_corr = stats.max_far_corr.max(corr.abs());
            }
            // Var(ΔW_i − ΔW_j)/dt = Σ_ii + Σ_jj − 2Σ_ij; its standard error for Gaussian data.
            let qv_true = sii + sjj - 2.0 * s;
            let qv_emp = emp(i, i) + emp(j, j) - 2.0 * e;
            let qv_se = qv_true * (2.0 / ns).sqrt();
            let bound = field.mollifier.c_check * dist2 / (field.epsilon * field.epsilon);
            if qv_emp > bound + 3.0 * qv_se {
                stats.qv_ratio_bound_ok = false;
            }
            stats.max_qv_error = stats.max_qv_error.max((qv_true - 2.0 * (1.0 - s)).abs());
        }
    }
    Ok(stats)
}

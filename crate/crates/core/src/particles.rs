//! The `N × M` interacting particle system on an equispaced grid.
//!
//! Columns sit at the cell centres `X_i` of a uniform partition of `[0,1]^d`;
//! each column carries `M` neurons with `B` orientation components. Noise is
//! shared across columns through the spatial covariance and independent across
//! the neuron index `k`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{softplus, Coefficient, Interaction, MeasureView, ModelError, ModelSpec};
use crate::noise::{CorrelatedNoiseField, NoiseError};
use crate::rng::{stream, Purpose};
use crate::sde::{reflected_euler_step_checked, SdeError};

#[derive(Debug, thiserror::Error)]
pub enum ParticleError {
    #[error("N must be a perfect d-th power (N = {n}, d = {d})")]
    NotPerfectPower { n: usize, d: usize },
    #[error("invalid dimension {0}")]
    BadDimension(usize),
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("step failed at column {i}, neuron {k}, step {n}: {source}")]
    Step { i: usize, k: usize, n: usize, source: SdeError },
}

/// Cell centres of the uniform partition of `[0,1]^d` into `N` cubes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub n: usize,
    pub dim: usize,
    /// Cells per axis, `N^{1/d}`.
    pub side: usize,
    /// Row-major `N × d`.
    pub points: Vec<f64>,
    pub cell_measure: f64,
    pub cell_diameter: f64,
}

impl SpatialGrid {
    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Index of the cell containing `x` (points on shared faces go to the upper cell).
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for a in 0..self.dim {
            let c = ((x[a] * self.side as f64).floor() as isize).clamp(0, self.side as isize - 1) as usize;
            idx = idx * self.side + c;
        }
        idx
    }
}

/// Integer `m` with `m^d = n`, if any.
pub fn integer_root(n: usize, d: usize) -> Option<usize> {
    if d == 0 {
        return None;
    }
    let guess = (n as f64).powf(1.0 / d as f64).round() as usize;
    (guess.saturating_sub(1)..=guess + 1).find(|&m| m.checked_pow(d as u32) == Some(n))
}

pub fn grid_locations(n: usize, d: usize) -> Result<SpatialGrid, ParticleError> {
    if d == 0 {
        return Err(ParticleError::BadDimension(d));
    }
    let side = integer_root(n, d).filter(|&m| m > 0).ok_or(ParticleError::NotPerfectPower { n, d })?;
    let h = 1.0 / side as f64;
    let mut points = Vec::with_capacity(n * d);
    for i in 0..n {
        // Last axis varies fastest.
        let mut rem = i;
        let mut coords = vec![0.0; d];
        for a in (0..d).rev() {
            coords[a] = ((rem % side) as f64 + 0.5) * h;
            rem /= side;
        }
        points.extend(coords);
    }
    Ok(SpatialGrid { n, dim: d, side, points, cell_measure: 1.0 / n as f64, cell_diameter: (d as f64).sqrt() * h })
}

/// Deterministic rough profile `A Σ_{n=0}^{L} 4^{−nα} cos(2π·2·4^n x_1)`.
///
/// Riemann sums over `4^m` cell centres alias every term with `n ≥ m` onto
/// the constant mode, so the midpoint-rule bias decays like `N^{−α}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LacunaryProfile {
    pub amplitude: f64,
    pub levels: usize,
}

impl LacunaryProfile {
    pub const NONE: LacunaryProfile = LacunaryProfile { amplitude: 0.0, levels: 0 };

    fn terms(&self, alpha: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let on = self.amplitude != 0.0;
        (0..=self.levels).filter(move |_| on).map(move |n| {
            let scale = 4f64.powi(n as i32);
            (self.amplitude * scale.powf(-alpha), 2.0 * PI * 2.0 * scale)
        })
    }

    pub fn eval(&self, alpha: f64, x: &[f64]) -> f64 {
        self.terms(alpha).map(|(a, w)| a * (w * x[0]).cos()).sum()
    }
}

/// Parameters of the random initial data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialDataSpec {
    pub alpha: f64,
    pub n_modes: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "no_profile")]
    pub profile: LacunaryProfile,
}

fn no_profile() -> LacunaryProfile {
    LacunaryProfile::NONE
}

impl InitialDataSpec {
    pub fn validate(&self) -> Result<(), ParticleError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ParticleError::BadAlpha(self.alpha));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite() && self.offset.is_finite()) {
            return Err(ParticleError::Config("initial amplitude must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Standard deviation of the Gaussian random part at any fixed point.
    pub fn gaussian_std(&self) -> f64 {
        let s2: f64 = (1..=self.n_modes).map(|j| (j as f64).powf(-(2.0 * self.alpha + 1.0))).sum();
        self.amplitude * (0.5 * s2).sqrt()
    }

    /// Deterministic part of the pre-softplus value at `x`.
    pub fn mean_argument(&self, x: &[f64]) -> f64 {
        self.offset + self.profile.eval(self.alpha, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Mode {
    coef: f64,
    /// `2π j w_j`.
    wave: Vec<f64>,
    theta: f64,
}

/// One realization `x ↦ softplus(offset + h(x) + Σ_j a_j cos(2π j⟨w_j,x⟩ + θ_j))`.
#[derive(Clone, Debug, PartialEq)]
pub struct HolderField {
    pub alpha: f64,
    pub dim: usize,
    pub orientations: usize,
    modes: Vec<Vec<Mode>>,
    offset: f64,
    profile: LacunaryProfile,
    /// Upper bound on `sup |u(x) − u(y)| / |x − y|^α` over all components.
    pub seminorm: f64,
}

impl HolderField {
    pub fn value(&self, x: &[f64], beta: usize) -> f64 {
        softplus(self.argument(x, beta))
    }

    pub fn argument(&self, x: &[f64], beta: usize) -> f64 {
        let mut v = self.offset + self.profile.eval(self.alpha, x);
        for m in &self.modes[beta] {
            let phase: f64 = m.wave.iter().zip(x).map(|(w, xi)| w * xi).sum();
            v += m.coef * (phase + m.theta).cos();
        }
        v
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (beta, o) in out.iter_mut().enumerate() {
            *o = self.value(x, beta);
        }
    }
}

/// `sup_{0<r≤diam} Σ_j a_j min(2, ω_j r) / r^α`.
///
/// On each interval between consecutive breakpoints `2/ω_j` the quotient has
/// the form `A r^{1−α} + C r^{−α}`, which has no interior maximum, so the
/// supremum is attained at a breakpoint or at `diam`.
fn cosine_sum_seminorm(terms: &[(f64, f64)], alpha: f64, diam: f64) -> f64 {
    let f = |r: f64| -> f64 { terms.iter().map(|&(a, w)| a.abs() * (w * r).min(2.0)).sum::<f64>() / r.powf(alpha) };
    let mut best = f(diam);
    for &(_, w) in terms {
        if w > 0.0 {
            let r = 2.0 / w;
            if r < diam {
                best = best.max(f(r));
            }
        }
    }
    best
}

/// Draws the initial field for column index `k`.
///
/// `ξ_j = sqrt(−ln U)` is Rayleigh with `E ξ² = 1`, which with a uniform phase
/// makes every mode, and hence the random part at a fixed point, exactly
/// Gaussian with variance `amplitude² · ½ Σ j^{−(2α+1)}`.
pub fn holder_initial_field(
    spec: &InitialDataSpec,
    dim: usize,
    orientations: usize,
    master_seed: u64,
    k: u64,
) -> HolderField {
    let alpha = spec.alpha;
    let mut modes = Vec::with_capacity(orientations);
    let diam = (dim as f64).sqrt();
    let profile_terms: Vec<(f64, f64)> = spec.profile.terms(alpha).collect();
    let mut seminorm = 0.0f64;
    for beta in 0..orientations {
        let mut rng = stream(master_seed, Purpose::Init, k, beta as u64, 0);
        let mut ms = Vec::with_capacity(spec.n_modes);
        let mut terms = profile_terms.clone();
        for j in 1..=spec.n_modes {
            let u: f64 = 1.0 - rng.gen::<f64>();
            let xi = (-u.ln()).sqrt();
            let theta = 2.0 * PI * rng.gen::<f64>();
            let mut w: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut w {
                *v *= 2.0 * PI * j as f64 / norm;
            }
            let coef = spec.amplitude * xi * (j as f64).powf(-(alpha + 0.5));
            terms.push((coef, 2.0 * PI * j as f64));
            ms.push(Mode { coef, wave: w, theta });
        }
        seminorm = seminorm.max(cosine_sum_seminorm(&terms, alpha, diam));
        modes.push(ms);
    }
    HolderField { alpha, dim, orientations, modes, offset: spec.offset, profile: spec.profile, seminorm }
}

/// The i.i.d. family `k ↦ u_k(·, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialFamily {
    pub spec: InitialDataSpec,
    pub dim: usize,
    pub orientations: usize,
    pub seed: u64,
}

impl InitialFamily {
    pub fn field(&self, key: u64) -> HolderField {
        holder_initial_field(&self.spec, self.dim, self.orientations, self.seed, key)
    }
}

/// Time grid and keying of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Times at which full snapshots are stored; each must be a multiple of `dt`.
    pub record_times: Vec<f64>,
    pub seed: u64,
    /// Each step of size `dt` is split into `2^refine_level` substeps along a
    /// Brownian bridge, so refined runs see the same Brownian path.
    pub refine_level: u32,
    /// Stream key of each neuron index `k` (identity when absent).
    pub column_keys: Option<Vec<u64>>,
}

impl RunConfig {
    pub fn new(horizon: f64, dt: f64, seed: u64) -> Self {
        Self { horizon, dt, record_times: vec![horizon], seed, refine_level: 0, column_keys: None }
    }

    pub fn coarse_steps(&self) -> Result<usize, ParticleError> {
        steps_in(self.horizon, self.dt).ok_or_else(|| {
            ParticleError::Config(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt))
        })
    }

    fn validate(&self, m: usize) -> Result<(usize, Vec<usize>), ParticleError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ParticleError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let steps = self.coarse_steps()?;
        let fine = 1usize << self.refine_level;
        let mut recs = Vec::with_capacity(self.record_times.len());
        for &t in &self.record_times {
            let s = steps_in(t, self.dt).filter(|&s| s <= steps).ok_or_else(|| {
                ParticleError::Config(format!("record time {t} is not a multiple of dt within the horizon"))
            })?;
            recs.push(s * fine);
        }
        if recs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ParticleError::Config("record times must be strictly increasing".into()));
        }
        if let Some(keys) = &self.column_keys {
            if keys.len() != m {
                return Err(ParticleError::Config(format!("{} column keys for M = {m}", keys.len())));
            }
        }
        Ok((steps, recs))
    }
}

fn steps_in(t: f64, dt: f64) -> Option<usize> {
    let r = t / dt;
    let s = r.round();
    (s >= 0.0 && (r - s).abs() <= 1e-9 * s.max(1.0)).then_some(s as usize)
}

/// `32` equispaced instants in `(0, T]` plus `t = 0`.
pub fn default_record_times(horizon: f64) -> Vec<f64> {
    (0..=32).map(|j| horizon * j as f64 / 32.0).collect()
}

/// Supplies the drift interaction `∫ c1^β(X_i, ·) f_t` for every column from
/// a known law instead of the empirical measure.
pub trait InteractionSource: Sync {
    /// Writes row-major `N × B` values at time `t`.
    fn column_interaction(&self, t: f64, out: &mut [f64]);
}

/// What the drift interaction of a system is integrated against.
#[derive(Clone, Copy)]
pub enum Driver<'a> {
    /// The system's own empirical measure.
    Empirical,
    External(&'a dyn InteractionSource),
}

/// Discrete reflection bookkeeping gathered during a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerCheck {
    pub min_u: f64,
    /// `ℓ = −|ℓ|` held exactly at every step.
    pub identity_exact: bool,
    /// `|ℓ|` grew only at steps ending on the boundary.
    pub complementarity: bool,
    pub steps: usize,
    pub pushes: usize,
}

impl LedgerCheck {
    fn new() -> Self {
        Self { min_u: f64::INFINITY, identity_exact: true, complementarity: true, steps: 0, pushes: 0 }
    }

    fn merge(&mut self, o: &LedgerCheck) {
        self.min_u = self.min_u.min(o.min_u);
        self.identity_exact &= o.identity_exact;
        self.complementarity &= o.complementarity;
        self.pushes += o.pushes;
    }

    pub fn holds(&self) -> bool {
        self.min_u >= 0.0 && self.identity_exact && self.complementarity
    }
}

/// Output of one system in a run.
#[derive(Clone, Debug)]
pub struct EnsembleRun {
    pub n: usize,
    pub m: usize,
    pub orientations: usize,
    pub record_times: Vec<f64>,
    /// One `M × N × B` array per record time, layout `[k][i][β]`.
    pub snapshots: Vec<Vec<f64>>,
    /// Final `|ℓ|`, layout `[k][i][β]`.
    pub ell_tv: Vec<f64>,
    /// `sup_t |u_ik(t)|` over every step, layout `[k][i]`.
    pub running_sup: Vec<f64>,
    pub ledger: LedgerCheck,
}

impl EnsembleRun {
    #[inline]
    pub fn index(&self, i: usize, k: usize) -> usize {
        k * self.n + i
    }
}

/// Systems advanced in lockstep on common noise.
#[derive(Clone, Debug)]
pub struct LockstepRun {
    pub runs: Vec<EnsembleRun>,
    /// `sup_t |u^{(0)}_ik − u^{(1)}_ik|²` per particle when two systems ran.
    pub sup_sq_diff: Option<Vec<f64>>,
}

enum ZShape {
    Zero,
    Column,
    Particle,
}

struct CoefPlan {
    shape: ZShape,
    /// `N × N` per orientation γ, `weight · K^γ(X_i − X_j) / N`.
    kernel: Vec<Vec<f64>>,
}

fn coef_plan(c: &Coefficient, grid: &SpatialGrid, driver: Option<Driver<'_>>) -> Result<CoefPlan, ParticleError> {
    if c.interaction.is_null() {
        return Ok(CoefPlan { shape: ZShape::Zero, kernel: vec![] });
    }
    if let Some(Driver::External(_)) = driver {
        return Ok(CoefPlan { shape: ZShape::Column, kernel: vec![] });
    }
    match &c.interaction {
        Interaction::Convolution { kernels, weight } => {
            let n = grid.n;
            let mut diff = vec![0.0; grid.dim];
            let kernel = kernels
                .iter()
                .map(|k| {
                    let mut mat = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            for (a, dz) in diff.iter_mut().enumerate() {
                                *dz = grid.point(i)[a] - grid.point(j)[a];
                            }
                            mat[i * n + j] = weight * k.eval(&diff) / n as f64;
                        }
                    }
                    mat
                })
                .collect();
            Ok(CoefPlan { shape: ZShape::Column, kernel })
        }
        Interaction::General(_) => Ok(CoefPlan { shape: ZShape::Particle, kernel: vec![] }),
        Interaction::None => unreachable!(),
    }
}

/// Fills `z` for one system; `u` is that system's `[k][i][β]` state.
#[allow(clippy::too_many_arguments)]
fn interaction_values(
    plan: &CoefPlan,
    c: &Coefficient,
    driver: Driver<'_>,
    grid: &SpatialGrid,
    m: usize,
    b: usize,
    t: f64,
    u: &[f64],
    z: &mut [f64],
) {
    let n = grid.n;
    match plan.shape {
        ZShape::Zero => z.iter_mut().for_each(|v| *v = 0.0),
        ZShape::Column => match driver {
            Driver::External(src) => src.column_interaction(t, z),
            Driver::Empirical => {
                // Column means of each component, then the kernel sum.
                let mut means = vec![0.0; n * b];
                for k in 0..m {
                    for (acc, v) in means.iter_mut().zip(&u[k * n * b..(k + 1) * n * b]) {
                        *acc += v;
                    }
                }
                let inv_m = 1.0 / m as f64;
                means.iter_mut().for_each(|v| *v *= inv_m);
                for i in 0..n {
                    let mut s = 0.0;
                    for (g, mat) in plan.kernel.iter().enumerate() {
                        let row = &mat[i * n..(i + 1) * n];
                        for j in 0..n {
                            s += row[j] * means[j * b + g];
                        }
                    }
                    for beta in 0..b {
                        z[i * b + beta] = s;
                    }
                }
            }
        },
        ZShape::Particle => {
            let c1 = match &c.interaction {
                Interaction::General(f) => f.clone(),
                _ => unreachable!(),
            };
            let w = 1.0 / (n * m) as f64;
            z.par_chunks_mut(n * b).enumerate().for_each(|(k, zk)| {
                for i in 0..n {
                    let ui = &u[(k * n + i) * b..(k * n + i + 1) * b];
                    for beta in 0..b {
                        let mut s = 0.0;
                        for k2 in 0..m {
                            for j in 0..n {
                                let v = &u[(k2 * n + j) * b..(k2 * n + j + 1) * b];
                                s += c1(grid.point(i), grid.point(j), t, ui, v, beta);
                            }
                        }
                        zk[i * b + beta] = w * s;
                    }
                }
            });
        }
    }
}

/// Advances every system in `drivers` on the same initial data and noise.
///
/// All systems share `model`; they differ only in what their drift
/// interaction is integrated against. State layout is `[k][system][i][β]`,
/// so one column of neurons for every system is a contiguous block and
/// columns step in parallel without affecting the result.
#[allow(clippy::too_many_arguments)]
pub fn run_lockstep(
    model: &ModelSpec,
    grid: &SpatialGrid,
    m: usize,
    noise: &CorrelatedNoiseField,
    init: &InitialFamily,
    cfg: &RunConfig,
    drivers: &[Driver<'_>],
) -> Result<LockstepRun, ParticleError> {
    let n = grid.n;
    let b = model.orientations;
    let s_count = drivers.len();
    if s_count == 0 || m == 0 {
        return Err(ParticleError::Config("need at least one system and M ≥ 1".into()));
    }
    if model.dim != grid.dim || init.dim != grid.dim || init.orientations != b {
        return Err(ParticleError::Config("model, grid and initial data dimensions disagree".into()));
    }
    if noise.orientations != b || noise.dim != grid.dim || noise.locations != grid.points {
        return Err(ParticleError::Config("noise locations must equal the grid points".into()));
    }
    init.spec.validate()?;
    let (coarse_steps, record_steps) = cfg.validate(m)?;
    let fine = 1usize << cfg.refine_level;
    let dt = cfg.dt / fine as f64;
    let keys: Vec<u64> = cfg.column_keys.clone().unwrap_or_else(|| (0..m as u64).collect());

    let drift_plans: Vec<CoefPlan> =
        drivers.iter().map(|d| coef_plan(&model.drift, grid, Some(*d))).collect::<Result<_, _>>()?;
    let diff_plan = coef_plan(&model.diffusion, grid, None)?;
    let diff_particle = matches!(diff_plan.shape, ZShape::Particle);
    let drift_particle: Vec<bool> = drift_plans.iter().map(|p| matches!(p.shape, ZShape::Particle)).collect();
    if drivers.iter().any(|d| matches!(d, Driver::External(_))) && !model.diffusion.interaction.is_null() {
        return Err(ParticleError::Config("an external law drives the drift only; diffusion must not interact".into()));
    }

    let block = n * b;
    let col = s_count * block;
    let mut u = vec![0.0; m * col];
    let mut ell = vec![0.0; m * col];
    let mut ell_tv = vec![0.0; m * col];
    let mut running_sup = vec![0.0; m * s_count * n];
    let mut sup_diff = vec![0.0; m * n];

    u.par_chunks_mut(col).enumerate().for_each(|(k, uk)| {
        let field = init.field(keys[k]);
        for i in 0..n {
            field.eval(grid.point(i), &mut uk[i * b..(i + 1) * b]);
        }
        for s in 1..s_count {
            let (head, tail) = uk.split_at_mut(s * block);
            tail[..block].copy_from_slice(&head[..block]);
        }
    });
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for k in 0..m {
        for s in 0..s_count {
            for i in 0..n {
                let off = k * col + s * block + i * b;
                running_sup[(k * s_count + s) * n + i] = norm(&u[off..off + b]);
            }
        }
    }

    let mut snapshots: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(record_steps.len()); s_count];
    let record = |u: &[f64], snapshots: &mut Vec<Vec<Vec<f64>>>| {
        for (s, snaps) in snapshots.iter_mut().enumerate() {
            let mut snap = vec![0.0; m * block];
            for k in 0..m {
                snap[k * block..(k + 1) * block].copy_from_slice(&u[k * col + s * block..k * col + (s + 1) * block]);
            }
            snaps.push(snap);
        }
    };
    let mut next_record = 0;
    if record_steps.first() == Some(&0) {
        record(&u, &mut snapshots);
        next_record = 1;
    }

    let mut drift_z: Vec<Vec<f64>> =
        drift_particle.iter().map(|&p| vec![0.0; if p { m * block } else { block }]).collect();
    let mut diff_z: Vec<Vec<f64>> = vec![vec![0.0; if diff_particle { m * block } else { block }]; s_count];
    let mut drift_outer: Vec<Vec<f64>> = vec![vec![0.0; block]; s_count];
    let mut diff_outer: Vec<Vec<f64>> = vec![vec![0.0; block]; s_count];
    let mut incr = vec![vec![vec![0.0; block]; fine]; m];
    let mut ledgers = vec![LedgerCheck::new(); s_count];
    let mut system_u = vec![0.0; m * block];

    for step in 0..coarse_steps {
        incr.par_iter_mut().enumerate().try_for_each(|(k, buf)| {
            noise.sample_refined_into(cfg.dt, cfg.refine_level, keys[k], step as u64, cfg.seed, buf)
        })?;
        for sub in 0..fine {
            let fine_index = step * fine + sub;
            let t = fine_index as f64 * dt;

            for s in 0..s_count {
                let needs_state = matches!(drivers[s], Driver::Empirical)
                    && (!matches!(drift_plans[s].shape, ZShape::Zero) || !matches!(diff_plan.shape, ZShape::Zero));
                if needs_state {
                    for k in 0..m {
                        system_u[k * block..(k + 1) * block]
                            .copy_from_slice(&u[k * col + s * block..k * col + (s + 1) * block]);
                    }
                }
                interaction_values(
                    &drift_plans[s],
                    &model.drift,
                    drivers[s],
                    grid,
                    m,
                    b,
                    t,
                    &system_u,
                    &mut drift_z[s],
                );
                interaction_values(
                    &diff_plan,
                    &model.diffusion,
                    Driver::Empirical,
                    grid,
                    m,
                    b,
                    t,
                    &system_u,
                    &mut diff_z[s],
                );
                if !drift_particle[s] {
                    column_outer(&model.drift, grid, b, t, &drift_z[s], &mut drift_outer[s]);
                }
                if !diff_particle {
                    column_outer(&model.diffusion, grid, b, t, &diff_z[s], &mut diff_outer[s]);
                }
            }

            let ctx = StepCtx {
                model,
                grid,
                b,
                s_count,
                dt,
                t,
                fine_index,
                drift_particle: &drift_particle,
                diff_particle,
                drift_z: &drift_z,
                diff_z: &diff_z,
                drift_outer: &drift_outer,
                diff_outer: &diff_outer,
            };
            let results: Vec<Result<Vec<LedgerCheck>, ParticleError>> = u
                .par_chunks_mut(col)
                .zip(ell.par_chunks_mut(col))
                .zip(ell_tv.par_chunks_mut(col))
                .zip(running_sup.par_chunks_mut(s_count * n))
                .zip(sup_diff.par_chunks_mut(n))
                .enumerate()
                .map(|(k, ((((uk, lk), tvk), supk), dk))| ctx.step_column(k, uk, lk, tvk, supk, dk, &incr[k][sub]))
                .collect();
            for r in results {
                for (s, l) in r?.iter().enumerate() {
                    ledgers[s].merge(l);
                }
            }
            for l in &mut ledgers {
                l.steps += 1;
            }

            if next_record < record_steps.len() && record_steps[next_record] == fine_index + 1 {
                record(&u, &mut snapshots);
                next_record += 1;
            }
        }
    }

    let runs = (0..s_count)
        .map(|s| {
            let mut tv = vec![0.0; m * block];
            let mut sup = vec![0.0; m * n];
            for k in 0..m {
                tv[k * block..(k + 1) * block].copy_from_slice(&ell_tv[k * col + s * block..k * col + (s + 1) * block]);
                sup[k * n..(k + 1) * n].copy_from_slice(&running_sup[(k * s_count + s) * n..(k * s_count + s + 1) * n]);
            }
            let mut ledger = ledgers[s];
            if coarse_steps == 0 {
                ledger.min_u = u.iter().cloned().fold(f64::INFINITY, f64::min);
            }
            EnsembleRun {
                n,
                m,
                orientations: b,
                record_times: cfg.record_times.clone(),
                snapshots: std::mem::take(&mut snapshots[s]),
                ell_tv: tv,
                running_sup: sup,
                ledger,
            }
        })
        .collect();
    Ok(LockstepRun { runs, sup_sq_diff: (s_count == 2).then_some(sup_diff) })
}

fn column_outer(c: &Coefficient, grid: &SpatialGrid, b: usize, t: f64, z: &[f64], out: &mut [f64]) {
    for i in 0..grid.n {
        let x = grid.point(i);
        for beta in 0..b {
            out[i * b + beta] = (c.outer)(x, t, z[i * b + beta], beta);
        }
    }
}

struct StepCtx<'a> {
    model: &'a ModelSpec,
    grid: &'a SpatialGrid,
    b: usize,
    s_count: usize,
    dt: f64,
    t: f64,
    fine_index: usize,
    drift_particle: &'a [bool],
    diff_particle: bool,
    drift_z: &'a [Vec<f64>],
    diff_z: &'a [Vec<f64>],
    drift_outer: &'a [Vec<f64>],
    diff_outer: &'a [Vec<f64>],
}

impl StepCtx<'_> {
    #[allow(clippy::too_many_arguments)]
    fn step_column(
        &self,
        k: usize,
        uk: &mut [f64],
        lk: &mut [f64],
        tvk: &mut [f64],
        supk: &mut [f64],
        dk: &mut [f64],
        dw: &[f64],
    ) -> Result<Vec<LedgerCheck>, ParticleError> {
        let b = self.b;
        let n = self.grid.n;
        let block = n * b;
        let mut drift = vec![0.0; b];
        let mut diff = vec![0.0; b];
        let mut ledgers = vec![LedgerCheck::new(); self.s_count];
        for s in 0..self.s_count {
            let ledger = &mut ledgers[s];
            for i in 0..n {
                let x = self.grid.point(i);
                let off = s * block + i * b;
                let ui = &uk[off..off + b];
                for beta in 0..b {
                    let outer_d = if self.drift_particle[s] {
                        (self.model.drift.outer)(x, self.t, self.drift_z[s][k * block + i * b + beta], beta)
                    } else {
                        self.drift_outer[s][i * b + beta]
                    };
                    let outer_s = if self.diff_particle {
                        (self.model.diffusion.outer)(x, self.t, self.diff_z[s][k * block + i * b + beta], beta)
                    } else {
                        self.diff_outer[s][i * b + beta]
                    };
                    drift[beta] = (self.model.drift.base)(x, self.t, ui, beta) + outer_d;
                    diff[beta] = (self.model.diffusion.base)(x, self.t, ui, beta) + outer_s;
                }
                let mut norm2 = 0.0;
                for beta in 0..b {
                    let j = off + beta;
                    let out =
                        reflected_euler_step_checked(beta, uk[j], drift[beta], diff[beta], dw[i * b + beta], self.dt)
                            .map_err(|source| ParticleError::Step { i, k, n: self.fine_index, source })?;
                    uk[j] = out.u;
                    if out.push > 0.0 {
                        ledger.pushes += 1;
                        if out.u != 0.0 {
                            ledger.complementarity = false;
                        }
                    }
                    tvk[j] += out.push;
                    lk[j] = -tvk[j];
                    if lk[j] != -tvk[j] || tvk[j] < 0.0 {
                        ledger.identity_exact = false;
                    }
                    ledger.min_u = ledger.min_u.min(out.u);
                    norm2 += out.u * out.u;
                }
                let sup = &mut supk[s * n + i];
                *sup = sup.max(norm2.sqrt());
            }
        }
        if self.s_count == 2 {
            for i in 0..n {
                let d2: f64 = (0..b).map(|beta| (uk[i * b + beta] - uk[block + i * b + beta]).powi(2)).sum();
                dk[i] = dk[i].max(d2);
            }
        }
        Ok(ledgers)
    }
}

/// Simulates the interacting particle system alone.
pub fn simulate_system(
    model: &ModelSpec,
    grid: &SpatialGrid,
    m: usize,
    noise: &CorrelatedNoiseField,
    init: &InitialFamily,
    cfg: &RunConfig,
) -> Result<EnsembleRun, ParticleError> {
    let mut out = run_lockstep(model, grid, m, noise, init, cfg, &[Driver::Empirical])?;
    Ok(out.runs.remove(0))
}

/// Uniform atoms `(X_i, u_ik)` with weight `1/(NM)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    pub grid: SpatialGrid,
    pub m: usize,
    pub orientations: usize,
    /// Layout `[k][i][β]`.
    pub values: Vec<f64>,
    pub t: f64,
}

impl EmpiricalMeasure {
    pub fn atom_count(&self) -> usize {
        self.grid.n * self.m
    }
}

impl MeasureView for EmpiricalMeasure {
    fn dim(&self) -> usize {
        self.grid.dim
    }

    fn orientations(&self) -> usize {
        self.orientations
    }

    fn for_each_atom(&self, f: &mut dyn FnMut(&[f64], &[f64], f64)) {
        let b = self.orientations;
        let n = self.grid.n;
        let w = 1.0 / (n * self.m) as f64;
        for k in 0..self.m {
            for i in 0..n {
                let off = (k * n + i) * b;
                f(self.grid.point(i), &self.values[off..off + b], w);
            }
        }
    }
}

/// Empirical measure of record `r` of a run.
pub fn empirical_measure(run: &EnsembleRun, grid: &SpatialGrid, r: usize) -> EmpiricalMeasure {
    EmpiricalMeasure {
        grid: grid.clone(),
        m: run.m,
        orientations: run.orientations,
        values: run.snapshots[r].clone(),
        t: run.record_times[r],
    }
}

//! Mean-field limit: the nonlinear Fokker–Planck system for the marginal laws
//! and McKean–Vlasov particles driven by its moment fields.
//!
//! For each spatial node `y` and orientation `β`, the marginal density on
//! `[0, u_max]` evolves under a conservative finite-volume scheme with
//! no-flux faces at both ends. Interface fluxes use the hybrid
//! central/upwind weighting, written as `F = A·m_left − C·m_right` with
//! `A, C ≥ 0`, so a step is a nonnegative combination of neighbouring masses
//! whenever the diagonal coefficient stays nonnegative.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::model::{softplus, softplus_inv, Interaction, ModelSpec};
use crate::noise::CorrelatedNoiseField;
use crate::particles::{
    run_lockstep, Driver, EnsembleRun, InitialDataSpec, InitialFamily, InteractionSource, ParticleError, RunConfig,
    SpatialGrid,
};

#[derive(Debug, thiserror::Error)]
pub enum MeanFieldError {
    #[error("CFL violation at node {node}, orientation {beta}, cell {cell}: dt = {dt} exceeds {limit}")]
    Cfl { node: usize, beta: usize, cell: usize, dt: f64, limit: f64 },
    #[error("mass drift {drift:e} at node {node}, orientation {beta}, step {step}")]
    MassDrift { node: usize, beta: usize, step: usize, drift: f64 },
    #[error("negative mass {mass:e} at node {node}, cell {cell}, step {step}")]
    Negative { node: usize, cell: usize, step: usize, mass: f64 },
    #[error("mass {mass:e} reached the top cell at node {node}; increase u_max")]
    Truncation { node: usize, mass: f64 },
    #[error("time {0} is not a recorded time")]
    Unrecorded(f64),
    #[error("unsupported model for the Fokker–Planck solver: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("Picard iteration did not reach {tol:e} within {iters} sweeps at step {step}")]
    Picard { tol: f64, iters: usize, step: usize },
    #[error(transparent)]
    Particle(#[from] ParticleError),
}

/// Uniform cells on `[0, u_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UCells {
    pub n_u: usize,
    pub u_max: f64,
}

impl UCells {
    pub fn new(n_u: usize, u_max: f64) -> Result<Self, MeanFieldError> {
        if n_u < 2 || !(u_max > 0.0 && u_max.is_finite()) {
            return Err(MeanFieldError::Config(format!("need n_u ≥ 2 and u_max > 0, got {n_u}, {u_max}")));
        }
        Ok(Self { n_u, u_max })
    }

    #[inline]
    pub fn du(&self) -> f64 {
        self.u_max / self.n_u as f64
    }

    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.du()
    }

    #[inline]
    pub fn edge(&self, i: usize) -> f64 {
        i as f64 * self.du()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_u).map(|i| self.center(i)).collect()
    }

    /// Same domain with half the cell width.
    pub fn refined(&self) -> Self {
        Self { n_u: 2 * self.n_u, u_max: self.u_max }
    }
}

/// Run-time diagnostics of a Fokker–Planck solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FpDiagnostics {
    pub steps: usize,
    /// Largest `|Σ m(t+dt) − Σ m(t)|` over steps and 1-D densities.
    pub max_mass_drift: f64,
    pub min_mass: f64,
    /// Largest `dt / limit` of the CFL guard (≤ 1 when the guard held).
    pub max_cfl_ratio: f64,
    pub max_top_mass: f64,
    pub picard_sweeps: usize,
}

/// Solution of the Fokker–Planck system on an `x`-grid × `u`-cell mesh.
#[derive(Clone, Debug)]
pub struct DensityEvolution {
    pub xgrid: SpatialGrid,
    pub orientations: usize,
    pub ucells: UCells,
    /// `true` when `densities` hold `n_u × n_u` joint masses (`B = 2`).
    pub joint: bool,
    pub record_times: Vec<f64>,
    /// Per record: `[node][β][cell]` (marginal) or `[node][cell_0][cell_1]` (joint).
    pub densities: Vec<Vec<f64>>,
    pub dt: f64,
    /// Moment fields at every step, `[node][β]`; entry `n` is time `n·dt`.
    pub moments: Vec<Vec<f64>>,
    pub diagnostics: FpDiagnostics,
}

impl DensityEvolution {
    pub fn record_index(&self, t: f64) -> Result<usize, MeanFieldError> {
        self.record_times
            .iter()
            .position(|&r| (r - t).abs() <= 1e-12 * t.abs().max(1.0))
            .ok_or(MeanFieldError::Unrecorded(t))
    }

    /// Marginal masses of node `p`, orientation `beta` at record `r`.
    pub fn marginal(&self, r: usize, p: usize, beta: usize) -> Vec<f64> {
        let n_u = self.ucells.n_u;
        let d = &self.densities[r];
        if self.joint {
            let blk = &d[p * n_u * n_u..(p + 1) * n_u * n_u];
            let mut out = vec![0.0; n_u];
            for a in 0..n_u {
                for c in 0..n_u {
                    if beta == 0 {
                        out[a] += blk[a * n_u + c];
                    } else {
                        out[c] += blk[a * n_u + c];
                    }
                }
            }
            out
        } else {
            let b = self.orientations;
            d[(p * b + beta) * n_u..(p * b + beta + 1) * n_u].to_vec()
        }
    }

    pub fn moment_times(&self) -> Vec<f64> {
        (0..self.moments.len()).map(|n| n as f64 * self.dt).collect()
    }
}

/// `m^β(y_p)` at a recorded time, `[node][β]`.
pub fn moment_field(density: &DensityEvolution, t: f64) -> Result<Vec<f64>, MeanFieldError> {
    let r = density.record_index(t)?;
    let b = density.orientations;
    let centers = density.ucells.centers();
    let mut out = vec![0.0; density.xgrid.n * b];
    for p in 0..density.xgrid.n {
        for beta in 0..b {
            out[p * b + beta] = density.marginal(r, p, beta).iter().zip(&centers).map(|(m, c)| m * c).sum();
        }
    }
    Ok(out)
}

/// `P(Z > x)` for a standard normal.
#[inline]
fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// `P(a < Z ≤ b)` without cancellation in either tail.
fn normal_interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        upper_tail(-b) - upper_tail(-a)
    } else {
        1.0 - upper_tail(-a) - upper_tail(b)
    }
}

/// Cell masses of the stationary law of `du = (−u + c)/τ dt + (σ/τ) dW`
/// reflected at `0`, restricted and normalized to `[0, u_max]`.
pub fn reflected_ou_stationary(c: f64, sigma: f64, tau: f64, ucells: &UCells) -> Vec<f64> {
    let sd = sigma / (2.0 * tau).sqrt();
    let mut m: Vec<f64> =
        (0..ucells.n_u).map(|i| normal_interval((ucells.edge(i) - c) / sd, (ucells.edge(i + 1) - c) / sd)).collect();
    let total: f64 = m.iter().sum();
    m.iter_mut().for_each(|v| *v /= total);
    m
}

/// Cell masses of `softplus(h(y) + s Z)` at every node, `[node][β][cell]`.
///
/// Probability above `u_max` is added to the top cell. A deterministic value
/// (`s = 0`) is split between the two nearest cell centres so that the mean
/// is reproduced exactly.
pub fn initial_density(spec: &InitialDataSpec, xgrid: &SpatialGrid, orientations: usize, ucells: &UCells) -> Vec<f64> {
    let n_u = ucells.n_u;
    let s = spec.gaussian_std();
    let mut out = vec![0.0; xgrid.n * orientations * n_u];
    for p in 0..xgrid.n {
        let h = spec.mean_argument(xgrid.point(p));
        let mut cells = vec![0.0; n_u];
        if s > 0.0 {
            let z = |edge: f64| if edge <= 0.0 { f64::NEG_INFINITY } else { (softplus_inv(edge) - h) / s };
            for (i, c) in cells.iter_mut().enumerate() {
                let hi = if i + 1 == n_u { f64::INFINITY } else { z(ucells.edge(i + 1)) };
                *c = normal_interval(z(ucells.edge(i)), hi);
            }
        } else {
            deposit(&mut cells, ucells, softplus(h));
        }
        for beta in 0..orientations {
            out[(p * orientations + beta) * n_u..(p * orientations + beta + 1) * n_u].copy_from_slice(&cells);
        }
    }
    out
}

/// Splits unit mass at `v` linearly between the neighbouring cell centres.
fn deposit(cells: &mut [f64], ucells: &UCells, v: f64) {
    let n_u = ucells.n_u;
    let pos = v / ucells.du() - 0.5;
    if pos <= 0.0 {
        cells[0] += 1.0;
    } else if pos >= (n_u - 1) as f64 {
        cells[n_u - 1] += 1.0;
    } else {
        let i = pos.floor() as usize;
        let w = pos - i as f64;
        cells[i] += 1.0 - w;
        cells[i + 1] += w;
    }
}

/// Time grid of a Fokker–Planck solve.
#[derive(Clone, Debug, PartialEq)]
pub struct FpConfig {
    pub horizon: f64,
    pub dt: f64,
    pub record_times: Vec<f64>,
    /// Iterate each step on the moment fields until they change by less than this.
    pub picard_tol: Option<f64>,
    /// Largest mass allowed in the top cell.
    pub top_cell_tol: f64,
}

impl FpConfig {
    pub fn new(horizon: f64, dt: f64, record_times: Vec<f64>) -> Self {
        Self { horizon, dt, record_times, picard_tol: None, top_cell_tol: 1e-10 }
    }

    fn steps(&self) -> Result<(usize, Vec<usize>), MeanFieldError> {
        let steps_in = |t: f64| -> Option<usize> {
            let r = t / self.dt;
            let s = r.round();
            (s >= 0.0 && (r - s).abs() <= 1e-9 * s.max(1.0)).then_some(s as usize)
        };
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(MeanFieldError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let n = steps_in(self.horizon).ok_or_else(|| {
            MeanFieldError::Config(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt))
        })?;
        let recs =
            self.record_times.iter().map(|&t| steps_in(t).filter(|&s| s <= n)).collect::<Option<Vec<_>>>().ok_or_else(
                || MeanFieldError::Config("record times must be multiples of dt within the horizon".into()),
            )?;
        if recs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MeanFieldError::Config("record times must be strictly increasing".into()));
        }
        Ok((n, recs))
    }
}

/// Step size for `horizon` that satisfies the CFL guard with margin `safety`
/// at the initial velocities, rounded so every multiple of `horizon / divisor`
/// is a step boundary.
pub fn suggest_dt(
    model: &ModelSpec,
    xgrid: &SpatialGrid,
    ucells: &UCells,
    f0: &[f64],
    horizon: f64,
    divisor: usize,
    safety: f64,
) -> Result<f64, MeanFieldError> {
    let ops = Operators::new(model, xgrid, ucells)?;
    let z = ops.interaction(&ops.moments(f0, false), 0.0);
    let mut limit = f64::INFINITY;
    let mut face = vec![0.0; ucells.n_u + 1];
    for p in 0..xgrid.n {
        for beta in 0..ops.b {
            ops.face_velocities(p, beta, 0.0, z[p * ops.b + beta], &mut face);
            let vmax = face.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let s = ops.sigma[p * ops.b + beta];
            let du = ucells.du();
            let l1 = if s > 0.0 { du * du / (s * s) } else { f64::INFINITY };
            let l2 = if vmax > 0.0 { du / vmax } else { f64::INFINITY };
            limit = limit.min(0.5 * l1.min(l2));
        }
    }
    if !limit.is_finite() {
        limit = horizon;
    }
    let div = divisor.max(1);
    let chunks = (horizon / (safety * limit) / div as f64).ceil().max(1.0) as usize;
    Ok(horizon / (chunks * div) as f64)
}

/// Precomputed pieces of the concrete drift and diffusion on the FP mesh.
struct Operators<'a> {
    model: &'a ModelSpec,
    xgrid: &'a SpatialGrid,
    ucells: UCells,
    b: usize,
    /// `weight · K^γ(y_p − y_q) / P`, one `P × P` matrix per γ.
    kernel: Vec<Vec<f64>>,
    /// Diffusion coefficient per `[node][β]`.
    sigma: Vec<f64>,
}

impl<'a> Operators<'a> {
    fn new(model: &'a ModelSpec, xgrid: &'a SpatialGrid, ucells: &UCells) -> Result<Self, MeanFieldError> {
        if !model.drift.separable || !model.diffusion.separable {
            return Err(MeanFieldError::Unsupported("coefficients must act componentwise".into()));
        }
        if !model.diffusion.interaction.is_null() {
            return Err(MeanFieldError::Unsupported("diffusion may not depend on the measure".into()));
        }
        if xgrid.dim != model.dim {
            return Err(MeanFieldError::Config("x-grid dimension differs from the model".into()));
        }
        let b = model.orientations;
        let pn = xgrid.n;
        let kernel = match &model.drift.interaction {
            Interaction::None => vec![],
            Interaction::Convolution { kernels, weight } => {
                if kernels.iter().all(|k| k.is_zero()) || *weight == 0.0 {
                    vec![]
                } else {
                    let mut diff = vec![0.0; xgrid.dim];
                    kernels
                        .iter()
                        .map(|k| {
                            let mut mat = vec![0.0; pn * pn];
                            for p in 0..pn {
                                for q in 0..pn {
                                    for (a, dz) in diff.iter_mut().enumerate() {
                                        *dz = xgrid.point(p)[a] - xgrid.point(q)[a];
                                    }
                                    mat[p * pn + q] = weight * k.eval(&diff) / pn as f64;
                                }
                            }
                            mat
                        })
                        .collect()
                }
            }
            Interaction::General(_) => {
                return Err(MeanFieldError::Unsupported("general interaction integrands".into()));
            }
        };
        let mut sigma = vec![0.0; pn * b];
        let mut uvec = vec![0.0; b];
        for p in 0..pn {
            let y = xgrid.point(p);
            for beta in 0..b {
                uvec[beta] = 0.0;
                let s0 = (model.diffusion.base)(y, 0.0, &uvec, beta) + (model.diffusion.outer)(y, 0.0, 0.0, beta);
                uvec[beta] = ucells.u_max;
                let s1 = (model.diffusion.base)(y, 0.0, &uvec, beta) + (model.diffusion.outer)(y, 0.0, 0.0, beta);
                uvec[beta] = 0.0;
                if (s0 - s1).abs() > 1e-12 * s0.abs().max(1.0) || !s0.is_finite() {
                    return Err(MeanFieldError::Unsupported("diffusion must be constant in u".into()));
                }
                sigma[p * b + beta] = s0;
            }
        }
        Ok(Self { model, xgrid, ucells: *ucells, b, kernel, sigma })
    }

    /// First moments `[node][β]` of marginal or joint masses.
    fn moments(&self, masses: &[f64], joint: bool) -> Vec<f64> {
        let n_u = self.ucells.n_u;
        let b = self.b;
        let centers = self.ucells.centers();
        let mut out = vec![0.0; self.xgrid.n * b];
        for p in 0..self.xgrid.n {
            if joint {
                let blk = &masses[p * n_u * n_u..(p + 1) * n_u * n_u];
                for a in 0..n_u {
                    for c in 0..n_u {
                        let w = blk[a * n_u + c];
                        out[p * 2] += w * centers[a];
                        out[p * 2 + 1] += w * centers[c];
                    }
                }
            } else {
                for beta in 0..b {
                    let cells = &masses[(p * b + beta) * n_u..(p * b + beta + 1) * n_u];
                    out[p * b + beta] = cells.iter().zip(&centers).map(|(m, c)| m * c).sum();
                }
            }
        }
        out
    }

    /// Interaction integral `[node][β]` from moment fields.
    fn interaction(&self, moments: &[f64], _t: f64) -> Vec<f64> {
        let pn = self.xgrid.n;
        let b = self.b;
        let mut z = vec![0.0; pn * b];
        if self.kernel.is_empty() {
            return z;
        }
        for p in 0..pn {
            let mut s = 0.0;
            for (g, mat) in self.kernel.iter().enumerate() {
                let row = &mat[p * pn..(p + 1) * pn];
                for q in 0..pn {
                    s += row[q] * moments[q * b + g];
                }
            }
            for beta in 0..b {
                z[p * b + beta] = s;
            }
        }
        z
    }

    /// Velocities at all `n_u + 1` faces; boundary faces carry no flux but are filled for diagnostics.
    fn face_velocities(&self, p: usize, beta: usize, t: f64, z: f64, out: &mut [f64]) {
        let y = self.xgrid.point(p);
        let outer = (self.model.drift.outer)(y, t, z, beta);
        let mut uvec = vec![0.0; self.b];
        for (f, v) in out.iter_mut().enumerate() {
            uvec[beta] = self.ucells.edge(f);
            *v = (self.model.drift.base)(y, t, &uvec, beta) + outer;
        }
    }
}

/// Advances one 1-D density by one step. Returns `(mass drift, min mass, cfl ratio)`.
fn step_1d(
    cells: &mut [f64],
    scratch: &mut [f64],
    face_v: &[f64],
    sigma: f64,
    du: f64,
    dt: f64,
) -> Result<(f64, f64, f64), (usize, f64)> {
    let n_u = cells.len();
    let diff = 0.5 * sigma * sigma / du;
    let mut vmax = 0.0f64;
    // Flux through face f (between cells f−1 and f), interior faces only.
    let coef = |f: usize| -> (f64, f64) {
        let v = face_v[f];
        let a = v.max(diff + 0.5 * v).max(0.0) / du;
        let c = (-v).max(diff - 0.5 * v).max(0.0) / du;
        (a, c)
    };
    let mut out_rate_prev_c = 0.0; // C at face i (outflow of cell i leftwards)
    let mut flux_in_prev = 0.0; // net flux through face i, positive rightwards
    let mut ratio = 0.0f64;
    let cfl_diff = if sigma > 0.0 { 0.5 * du * du / (sigma * sigma) } else { f64::INFINITY };
    for f in 1..n_u {
        vmax = vmax.max(face_v[f].abs());
    }
    let cfl_adv = if vmax > 0.0 { 0.5 * du / vmax } else { f64::INFINITY };
    let limit = cfl_diff.min(cfl_adv);
    if dt > limit {
        let cell = (1..n_u).max_by(|&a, &b| face_v[a].abs().total_cmp(&face_v[b].abs())).unwrap_or(0);
        return Err((cell, limit));
    }
    ratio = ratio.max(dt / limit);
    let before: f64 = cells.iter().sum();
    for i in 0..n_u {
        let (a_right, c_right, flux_right) = if i + 1 < n_u {
            let (a, c) = coef(i + 1);
            (a, c, a * cells[i] - c * cells[i + 1])
        } else {
            (0.0, 0.0, 0.0)
        };
        let diag = 1.0 - dt * (a_right + out_rate_prev_c);
        if diag < 0.0 {
            return Err((i, limit));
        }
        scratch[i] = cells[i] + dt * (flux_in_prev - flux_right);
        out_rate_prev_c = c_right;
        flux_in_prev = flux_right;
    }
    let mut min = f64::INFINITY;
    for (c, s) in cells.iter_mut().zip(scratch.iter()) {
        *c = *s;
        min = min.min(*s);
    }
    let after: f64 = cells.iter().sum();
    Ok(((after - before).abs(), min, ratio))
}

/// Solves the marginal Fokker–Planck system.
///
/// `f0` is `[node][β][cell]` with unit mass per 1-D density. Moment fields
/// enter lagged by one step unless `cfg.picard_tol` is set.
pub fn solve_marginal_fp(
    model: &ModelSpec,
    xgrid: &SpatialGrid,
    ucells: &UCells,
    f0: &[f64],
    cfg: &FpConfig,
) -> Result<DensityEvolution, MeanFieldError> {
    let ops = Operators::new(model, xgrid, ucells)?;
    let b = ops.b;
    let n_u = ucells.n_u;
    let pn = xgrid.n;
    if f0.len() != pn * b * n_u {
        return Err(MeanFieldError::Config(format!(
            "initial density has {} entries, expected {}",
            f0.len(),
            pn * b * n_u
        )));
    }
    let (steps, record_steps) = cfg.steps()?;
    let dt = cfg.dt;
    let du = ucells.du();
    let mut masses = f0.to_vec();
    let mut diag = FpDiagnostics { min_mass: f64::INFINITY, ..Default::default() };
    let mut densities = Vec::with_capacity(record_steps.len());
    let mut moments = Vec::with_capacity(steps + 1);
    let mut m_now = ops.moments(&masses, false);
    moments.push(m_now.clone());
    let mut next_record = 0;
    if record_steps.first() == Some(&0) {
        densities.push(masses.clone());
        next_record = 1;
    }

    let advance = |src: &[f64],
                   z: &[f64],
                   t: f64,
                   step: usize,
                   out: &mut Vec<f64>|
     -> Result<(f64, f64, f64, f64), MeanFieldError> {
        out.copy_from_slice(src);
        let stats: Vec<Result<(f64, f64, f64, f64), MeanFieldError>> = out
            .par_chunks_mut(n_u)
            .enumerate()
            .map(|(idx, cells)| {
                let (p, beta) = (idx / b, idx % b);
                let mut face = vec![0.0; n_u + 1];
                let mut scratch = vec![0.0; n_u];
                ops.face_velocities(p, beta, t, z[idx], &mut face);
                let (drift, min, ratio) = step_1d(cells, &mut scratch, &face, ops.sigma[idx], du, dt)
                    .map_err(|(cell, limit)| MeanFieldError::Cfl { node: p, beta, cell, dt, limit })?;
                if drift > 1e-10 {
                    return Err(MeanFieldError::MassDrift { node: p, beta, step, drift });
                }
                if min < 0.0 {
                    return Err(MeanFieldError::Negative { node: p, cell: 0, step, mass: min });
                }
                Ok((drift, min, ratio, cells[n_u - 1]))
            })
            .collect();
        let mut agg = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64);
        for s in stats {
            let (d, m, r, top) = s?;
            agg = (agg.0.max(d), agg.1.min(m), agg.2.max(r), agg.3.max(top));
        }
        Ok(agg)
    };

    let mut next = masses.clone();
    for step in 0..steps {
        let t = step as f64 * dt;
        let z_now = ops.interaction(&m_now, t);
        let mut stats = advance(&masses, &z_now, t, step, &mut next)?;
        if let Some(tol) = cfg.picard_tol {
            let mut m_next = ops.moments(&next, false);
            let mut converged = false;
            for sweep in 0..100 {
                let m_mid: Vec<f64> = m_now.iter().zip(&m_next).map(|(a, c)| 0.5 * (a + c)).collect();
                let z_mid = ops.interaction(&m_mid, t);
                stats = advance(&masses, &z_mid, t, step, &mut next)?;
                let m_new = ops.moments(&next, false);
                let change = m_new.iter().zip(&m_next).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                m_next = m_new;
                diag.picard_sweeps = diag.picard_sweeps.max(sweep + 1);
                if change < tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(MeanFieldError::Picard { tol, iters: 100, step });
            }
        }
        std::mem::swap(&mut masses, &mut next);
        diag.max_mass_drift = diag.max_mass_drift.max(stats.0);
        diag.min_mass = diag.min_mass.min(stats.1);
        diag.max_cfl_ratio = diag.max_cfl_ratio.max(stats.2);
        diag.max_top_mass = diag.max_top_mass.max(stats.3);
        if stats.3 > cfg.top_cell_tol {
            let node = (0..pn * b)
                .max_by(|&a, &c| masses[a * n_u + n_u - 1].total_cmp(&masses[c * n_u + n_u - 1]))
                .unwrap_or(0)
                / b;
            return Err(MeanFieldError::Truncation { node, mass: stats.3 });
        }
        diag.steps += 1;
        m_now = ops.moments(&masses, false);
        moments.push(m_now.clone());
        if next_record < record_steps.len() && record_steps[next_record] == step + 1 {
            densities.push(masses.clone());
            next_record += 1;
        }
    }
    if steps == 0 {
        diag.min_mass = masses.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    Ok(DensityEvolution {
        xgrid: xgrid.clone(),
        orientations: b,
        ucells: *ucells,
        joint: false,
        record_times: cfg.record_times.clone(),
        densities,
        dt,
        moments,
        diagnostics: diag,
    })
}

/// Joint `B = 2` solver with Lie splitting across the two activity axes.
///
/// Each step advances axis 0 with the current moment fields, recomputes the
/// moments, then advances axis 1. `f0` is `[node][β][cell]` marginal masses;
/// the initial joint law is their product.
pub fn solve_joint_fp_small(
    model: &ModelSpec,
    xgrid: &SpatialGrid,
    ucells: &UCells,
    f0: &[f64],
    cfg: &FpConfig,
) -> Result<DensityEvolution, MeanFieldError> {
    if model.orientations != 2 {
        return Err(MeanFieldError::Unsupported(format!("joint solver needs B = 2, got {}", model.orientations)));
    }
    let ops = Operators::new(model, xgrid, ucells)?;
    let n_u = ucells.n_u;
    let pn = xgrid.n;
    if f0.len() != pn * 2 * n_u {
        return Err(MeanFieldError::Config("initial marginals have the wrong length".into()));
    }
    let (steps, record_steps) = cfg.steps()?;
    let dt = cfg.dt;
    let du = ucells.du();
    let nn = n_u * n_u;
    let mut joint = vec![0.0; pn * nn];
    for p in 0..pn {
        let f_a = &f0[(p * 2) * n_u..(p * 2 + 1) * n_u];
        let f_b = &f0[(p * 2 + 1) * n_u..(p * 2 + 2) * n_u];
        for a in 0..n_u {
            for c in 0..n_u {
                joint[p * nn + a * n_u + c] = f_a[a] * f_b[c];
            }
        }
    }
    let mut diag = FpDiagnostics { min_mass: f64::INFINITY, ..Default::default() };
    let mut densities = Vec::new();
    let mut moments = vec![ops.moments(&joint, true)];
    let mut next_record = 0;
    if record_steps.first() == Some(&0) {
        densities.push(joint.clone());
        next_record = 1;
    }

    for step in 0..steps {
        let t = step as f64 * dt;
        for axis in 0..2 {
            let m = ops.moments(&joint, true);
            let z = ops.interaction(&m, t);
            let results: Vec<Result<(f64, f64, f64), MeanFieldError>> = joint
                .par_chunks_mut(nn)
                .enumerate()
                .map(|(p, blk)| {
                    let mut face = vec![0.0; n_u + 1];
                    ops.face_velocities(p, axis, t, z[p * 2 + axis], &mut face);
                    let mut line = vec![0.0; n_u];
                    let mut scratch = vec![0.0; n_u];
                    let before: f64 = blk.iter().sum();
                    let (mut min, mut ratio) = (f64::INFINITY, 0.0f64);
                    for other in 0..n_u {
                        for i in 0..n_u {
                            line[i] = if axis == 0 { blk[i * n_u + other] } else { blk[other * n_u + i] };
                        }
                        let (_, mn, r) = step_1d(&mut line, &mut scratch, &face, ops.sigma[p * 2 + axis], du, dt)
                            .map_err(|(cell, limit)| MeanFieldError::Cfl { node: p, beta: axis, cell, dt, limit })?;
                        min = min.min(mn);
                        ratio = ratio.max(r);
                        for i in 0..n_u {
                            if axis == 0 {
                                blk[i * n_u + other] = line[i];
                            } else {
                                blk[other * n_u + i] = line[i];
                            }
                        }
                    }
                    let after: f64 = blk.iter().sum();
                    let drift = (after - before).abs();
                    if drift > 1e-10 {
                        return Err(MeanFieldError::MassDrift { node: p, beta: axis, step, drift });
                    }
                    if min < 0.0 {
                        return Err(MeanFieldError::Negative { node: p, cell: 0, step, mass: min });
                    }
                    Ok((drift, min, ratio))
                })
                .collect();
            for r in results {
                let (d, mn, ra) = r?;
                diag.max_mass_drift = diag.max_mass_drift.max(d);
                diag.min_mass = diag.min_mass.min(mn);
                diag.max_cfl_ratio = diag.max_cfl_ratio.max(ra);
            }
        }
        diag.steps += 1;
        moments.push(ops.moments(&joint, true));
        if next_record < record_steps.len() && record_steps[next_record] == step + 1 {
            densities.push(joint.clone());
            next_record += 1;
        }
    }
    Ok(DensityEvolution {
        xgrid: xgrid.clone(),
        orientations: 2,
        ucells: *ucells,
        joint: true,
        record_times: cfg.record_times.clone(),
        densities,
        dt,
        moments,
        diagnostics: diag,
    })
}

/// `sup |f_joint − f^0 ⊗ f^1|` over nodes and cells at record `r`.
pub fn joint_product_gap(joint: &DensityEvolution, marginal: &DensityEvolution, r: usize) -> f64 {
    let n_u = joint.ucells.n_u;
    let nn = n_u * n_u;
    let mut gap = 0.0f64;
    for p in 0..joint.xgrid.n {
        let f_a = marginal.marginal(r, p, 0);
        let f_b = marginal.marginal(r, p, 1);
        let blk = &joint.densities[r][p * nn..(p + 1) * nn];
        for a in 0..n_u {
            for c in 0..n_u {
                gap = gap.max((blk[a * n_u + c] - f_a[a] * f_b[c]).abs());
            }
        }
    }
    gap
}

/// Drift interaction seen by McKean–Vlasov particles at arbitrary columns.
///
/// The convolution with the reference moment field is evaluated at the exact
/// particle locations by midpoint quadrature over the reference nodes and
/// interpolated linearly in time between solver steps.
pub struct ReferenceInteraction {
    pub dt: f64,
    pub orientations: usize,
    /// One `N × B` array per reference step.
    pub values: Vec<Vec<f64>>,
}

impl ReferenceInteraction {
    pub fn new(model: &ModelSpec, reference: &DensityEvolution, grid: &SpatialGrid) -> Result<Self, MeanFieldError> {
        let b = model.orientations;
        if reference.orientations != b || reference.xgrid.dim != grid.dim {
            return Err(MeanFieldError::Config("reference law does not match the model".into()));
        }
        let pn = reference.xgrid.n;
        let n = grid.n;
        let weights: Vec<Vec<f64>> = match &model.drift.interaction {
            Interaction::Convolution { kernels, weight } if !model.drift.interaction.is_null() => {
                let mut diff = vec![0.0; grid.dim];
                kernels
                    .iter()
                    .map(|k| {
                        let mut mat = vec![0.0; n * pn];
                        for i in 0..n {
                            for q in 0..pn {
                                for (a, dz) in diff.iter_mut().enumerate() {
                                    *dz = grid.point(i)[a] - reference.xgrid.point(q)[a];
                                }
                                mat[i * pn + q] = weight * k.eval(&diff) / pn as f64;
                            }
                        }
                        mat
                    })
                    .collect()
            }
            Interaction::None => vec![],
            Interaction::Convolution { .. } => vec![],
            Interaction::General(_) => {
                return Err(MeanFieldError::Unsupported("general interaction integrands".into()));
            }
        };
        let values = reference
            .moments
            .par_iter()
            .map(|m| {
                let mut z = vec![0.0; n * b];
                if weights.is_empty() {
                    return z;
                }
                for i in 0..n {
                    let mut s = 0.0;
                    for (g, mat) in weights.iter().enumerate() {
                        let row = &mat[i * pn..(i + 1) * pn];
                        for q in 0..pn {
                            s += row[q] * m[q * b + g];
                        }
                    }
                    for beta in 0..b {
                        z[i * b + beta] = s;
                    }
                }
                z
            })
            .collect();
        Ok(Self { dt: reference.dt, orientations: b, values })
    }
}

impl InteractionSource for ReferenceInteraction {
    fn column_interaction(&self, t: f64, out: &mut [f64]) {
        let last = self.values.len() - 1;
        let pos = (t / self.dt).max(0.0);
        let idx = (pos.floor() as usize).min(last);
        if idx == last {
            out.copy_from_slice(&self.values[last]);
            return;
        }
        let w = pos - idx as f64;
        let (a, c) = (&self.values[idx], &self.values[idx + 1]);
        for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(c)) {
            *o = if w == 0.0 { *x } else { (1.0 - w) * x + w * y };
        }
    }
}

/// McKean–Vlasov particles driven by the reference law on the same keys as
/// the particle system.
pub fn simulate_coupled_mv(
    model: &ModelSpec,
    grid: &SpatialGrid,
    m: usize,
    noise: &CorrelatedNoiseField,
    init: &InitialFamily,
    reference: &DensityEvolution,
    cfg: &RunConfig,
) -> Result<EnsembleRun, MeanFieldError> {
    let src = ReferenceInteraction::new(model, reference, grid)?;
    let mut out = run_lockstep(model, grid, m, noise, init, cfg, &[Driver::External(&src)])?;
    Ok(out.runs.remove(0))
}

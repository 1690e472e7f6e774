//! Convergence experiments: coupled particle errors, the three-term
//! Wasserstein splitting, and log-log rate fits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::meanfield::{
    initial_density, moment_field, solve_marginal_fp, suggest_dt, DensityEvolution, FpConfig, MeanFieldError,
    ReferenceInteraction, UCells,
};
use crate::model::{
    build_concrete_model, concrete_constants, ExternalInput, FiringRate, GridCellParams, Kernel, ModelError, ModelSpec,
    TimeConstant,
};
use crate::noise::{build_field, default_epsilon, CorrelatedNoiseField, MollifierProfile, NoiseError};
use crate::particles::{
    default_record_times, grid_locations, integer_root, run_lockstep, Driver, InitialDataSpec, InitialFamily,
    LacunaryProfile, ParticleError, RunConfig, SpatialGrid,
};
use crate::rng::mix64;
use crate::transport::{
    coupling_upper_bound, lattice_w1, subsampled_w1, w_weighted_1d, DiscreteMeasure, GroundMetric, LatticeDensity,
    TransportError,
};

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid plan: {field}: {reason}")]
    Plan { field: String, reason: String },
    #[error("fit needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("nonpositive value {value} at scale {scale}")]
    Nonpositive { scale: f64, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Particle(#[from] ParticleError),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

fn plan_err(field: &str, reason: impl Into<String>) -> LabError {
    LabError::Plan { field: field.into(), reason: reason.into() }
}

/// How the noise correlation length is chosen for each `N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EpsilonPolicy {
    Fixed {
        value: f64,
    },
    /// `N^{-1/d}/3`.
    Linked,
}

impl EpsilonPolicy {
    pub fn epsilon(&self, n: usize, dim: usize) -> f64 {
        match *self {
            EpsilonPolicy::Fixed { value } => value,
            EpsilonPolicy::Linked => default_epsilon(n, dim),
        }
    }
}

/// Mesh of the Fokker–Planck reference solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpResolution {
    /// Nodes per axis; defaults to three times the largest particle side.
    #[serde(default)]
    pub side: Option<usize>,
    pub n_u: usize,
    pub u_max: f64,
    /// Step size; chosen from the CFL guard when absent.
    #[serde(default)]
    pub dt: Option<f64>,
}

/// Optional self-checks of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanChecks {
    /// Re-run every cell with half the step on the same Brownian paths.
    #[serde(default)]
    pub dt_halving: bool,
    /// Re-solve the reference with half the activity cell width.
    #[serde(default)]
    pub fp_refinement: bool,
}

impl Default for PlanChecks {
    fn default() -> Self {
        Self { dt_halving: false, fp_refinement: false }
    }
}

/// Full description of a convergence experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub preset: String,
    pub model: GridCellParams,
    pub initial: InitialDataSpec,
    /// `(N, M)` pairs.
    pub cells: Vec<[usize; 2]>,
    pub horizon: f64,
    pub dt: f64,
    pub epsilon: EpsilonPolicy,
    pub mollifier: MollifierProfile,
    pub replicas: usize,
    pub master_seed: u64,
    pub fp: FpResolution,
    /// Defaults to 32 equispaced instants plus `t = 0`.
    #[serde(default)]
    pub record_times: Option<Vec<f64>>,
    #[serde(default)]
    pub checks: PlanChecks,
}

/// Smallest replica count accepted for slope fits.
pub const MIN_REPLICAS: usize = 8;

impl ExperimentPlan {
    pub fn dim(&self) -> usize {
        self.model.dim
    }

    pub fn orientations(&self) -> usize {
        self.model.orientations
    }

    pub fn alpha(&self) -> f64 {
        self.initial.alpha
    }

    pub fn record_times(&self) -> Vec<f64> {
        self.record_times.clone().unwrap_or_else(|| default_record_times(self.horizon))
    }

    pub fn model_spec(&self) -> Result<ModelSpec, LabError> {
        let mut spec = build_concrete_model(&self.model)?;
        spec.alpha = self.alpha();
        spec.declared = concrete_constants(&self.model, spec.alpha, spec.activity_box);
        Ok(spec)
    }

    /// Reference nodes per axis.
    pub fn fp_side(&self) -> usize {
        self.fp
            .side
            .unwrap_or_else(|| 3 * self.cells.iter().filter_map(|c| integer_root(c[0], self.dim())).max().unwrap_or(1))
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.model.validate()?;
        self.initial.validate()?;
        let d = self.dim();
        if self.cells.is_empty() {
            return Err(plan_err("cells", "at least one (N, M) pair is required"));
        }
        for &[n, m] in &self.cells {
            if n == 0 || integer_root(n, d).is_none() {
                return Err(plan_err("cells", format!("N must be a perfect d-th power (N = {n}, d = {d})")));
            }
            if m == 0 {
                return Err(plan_err("cells", "M must be at least 1"));
            }
        }
        if self.replicas < MIN_REPLICAS {
            return Err(plan_err("replicas", format!("need at least {MIN_REPLICAS}, got {}", self.replicas)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(plan_err("horizon", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(plan_err("dt", "must lie in (0, horizon]"));
        }
        let steps = (self.horizon / self.dt).round();
        if (self.horizon / self.dt - steps).abs() > 1e-9 * steps {
            return Err(plan_err("dt", "horizon must be a multiple of dt"));
        }
        let rec = self.record_times();
        if rec.is_empty() || rec.windows(2).any(|w| w[1] <= w[0]) {
            return Err(plan_err("record_times", "must be nonempty and strictly increasing"));
        }
        for &t in &rec {
            let s = t / self.dt;
            if t < 0.0 || t > self.horizon * (1.0 + 1e-12) || (s - s.round()).abs() > 1e-9 * s.max(1.0) {
                return Err(plan_err("record_times", format!("{t} is not a multiple of dt within the horizon")));
            }
        }
        if let EpsilonPolicy::Fixed { value } = self.epsilon {
            if !(value > 0.0 && value.is_finite()) {
                return Err(plan_err("epsilon", "fixed value must be positive"));
            }
        }
        if self.fp.n_u < 2 || !(self.fp.u_max > 0.0 && self.fp.u_max.is_finite()) {
            return Err(plan_err("fp", "need n_u ≥ 2 and u_max > 0"));
        }
        if self.fp.side == Some(0) {
            return Err(plan_err("fp.side", "must be positive"));
        }
        if let Some(dt) = self.fp.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(plan_err("fp.dt", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Seed of replica `r`; the same for every `(N, M)` so cells share randomness.
pub fn replica_seed(master: u64, r: usize) -> u64 {
    mix64(master ^ mix64(0x7265_706c_6963_6100 ^ r as u64))
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Coupled particle error of one `(N, M)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub n: usize,
    pub m: usize,
    /// `E[sup_t |u − ū|²]^{1/2}` averaged over particles and replicas.
    pub error: f64,
    pub stderr: f64,
    /// Same quantity with the step halved, when checked.
    pub error_half_dt: Option<f64>,
    /// Every reflection invariant held in every run of the cell.
    pub ledger_ok: bool,
}

impl CellError {
    /// Relative change of the error under step halving.
    pub fn dt_change(&self) -> Option<f64> {
        self.error_half_dt.map(|h| if self.error == 0.0 { h.abs() } else { (h - self.error).abs() / self.error })
    }
}

/// Wasserstein splitting at one `(N, M, t)`; terms are replica means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub n: usize,
    pub m: usize,
    pub t: f64,
    /// Index-pairing bound on `W1(f_MN, f̄_MN)`.
    pub coupling: f64,
    pub coupling_se: f64,
    /// Subsampled exact `W1(f_MN, f̄_MN)` and its spread over repetitions.
    pub coupling_subsampled: f64,
    pub coupling_subsampled_spread: f64,
    /// Per-node `W1(f̄_MN, f̄_N)`.
    pub sampling: f64,
    pub sampling_se: f64,
    /// Pairing bound on `W1(f̄_N, f)`; identical across replicas.
    pub riemann: f64,
    /// Exact `W1(f_MN, f)` against the gridded reference law.
    pub total: f64,
    pub total_se: f64,
    /// Smallest `coupling + sampling + riemann − total` over replicas.
    pub triangle_slack: f64,
}

/// Weighted least-squares line through `(log scale, log error)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    /// 95% interval from the Student t quantile.
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

/// Checks on the reference solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub side: usize,
    pub n_u: usize,
    pub dt: f64,
    pub max_mass_drift: f64,
    pub min_mass: f64,
    /// Largest relative change of the moment fields when `Δu` is halved.
    pub refinement_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub preset: String,
    pub master_seed: u64,
    pub replicas: usize,
    pub errors: Vec<CellError>,
    pub splitting: Vec<SplitRow>,
    /// Named fits, e.g. `"error-vs-M"`.
    pub slopes: Vec<(String, SlopeFit)>,
    pub reference: Option<ReferenceCheck>,
    /// Cleared when a self-check failed.
    pub valid: bool,
    pub notes: Vec<String>,
}

impl ConvergenceReport {
    pub fn empty(preset: &str, master_seed: u64, replicas: usize) -> Self {
        Self {
            preset: preset.into(),
            master_seed,
            replicas,
            errors: vec![],
            splitting: vec![],
            slopes: vec![],
            reference: None,
            valid: true,
            notes: vec![],
        }
    }

    pub fn slope(&self, name: &str) -> Option<&SlopeFit> {
        self.slopes.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }
}

/// Largest relative change allowed for the reference under `Δu` halving.
pub const FP_REFINEMENT_TOL: f64 = 0.01;
/// Largest relative change of `e(N, M)` allowed under step halving.
pub const DT_HALVING_TOL: f64 = 0.10;

fn record_divisor(plan: &ExperimentPlan) -> usize {
    let rec = plan.record_times();
    (1..=1 << 16)
        .find(|&q| {
            rec.iter().all(|&t| {
                let s = t * q as f64 / plan.horizon;
                (s - s.round()).abs() < 1e-9 * s.max(1.0)
            })
        })
        .unwrap_or(1 << 16)
}

fn solve_reference(
    plan: &ExperimentPlan,
    model: &ModelSpec,
    side: usize,
    ucells: UCells,
) -> Result<DensityEvolution, LabError> {
    let d = plan.dim();
    let xgrid = grid_locations(side.pow(d as u32), d)?;
    let f0 = initial_density(&plan.initial, &xgrid, plan.orientations(), &ucells);
    let dt = match plan.fp.dt {
        Some(dt) if ucells.n_u == plan.fp.n_u => dt,
        _ => suggest_dt(model, &xgrid, &ucells, &f0, plan.horizon, record_divisor(plan), 0.5)?,
    };
    let cfg = FpConfig::new(plan.horizon, dt, plan.record_times());
    Ok(solve_marginal_fp(model, &xgrid, &ucells, &f0, &cfg)?)
}

/// Solves the reference law of a plan and runs its requested refinement check.
pub fn reference_law(plan: &ExperimentPlan) -> Result<(DensityEvolution, ReferenceCheck), LabError> {
    plan.validate()?;
    let model = plan.model_spec()?;
    let side = plan.fp_side();
    let ucells = UCells::new(plan.fp.n_u, plan.fp.u_max)?;
    let fp = solve_reference(plan, &model, side, ucells)?;
    let refinement_change = if plan.checks.fp_refinement {
        let fine = solve_reference(plan, &model, side, ucells.refined())?;
        let mut worst = 0.0f64;
        for &t in &fp.record_times {
            let a = moment_field(&fp, t)?;
            let b = moment_field(&fine, t)?;
            let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
            let diff = a.iter().zip(&b).fold(0.0f64, |s, (x, y)| s.max((x - y).abs()));
            worst = worst.max(diff / scale);
        }
        Some(worst)
    } else {
        None
    };
    let check = ReferenceCheck {
        side,
        n_u: plan.fp.n_u,
        dt: fp.dt,
        max_mass_drift: fp.diagnostics.max_mass_drift,
        min_mass: fp.diagnostics.min_mass,
        refinement_change,
    };
    Ok((fp, check))
}

/// Reference node holding particle node `i` of a 1-D grid, if any.
fn reference_column(grid: &SpatialGrid, fp_side: usize, i: usize) -> Option<usize> {
    if fp_side % grid.side != 0 || (fp_side / grid.side) % 2 == 0 {
        return None;
    }
    let r = fp_side / grid.side;
    Some(i * r + (r - 1) / 2)
}

/// Terms of the splitting that do not depend on the replica.
struct SplitContext {
    /// `[record][column][cell]` masses `/ P`, the gridded reference law.
    lattices: Vec<LatticeDensity>,
    /// `[record][node]` reference marginal at particle node `i`.
    node_laws: Vec<Vec<Vec<f64>>>,
    riemann: Vec<f64>,
    columns: Vec<usize>,
    centers: Vec<f64>,
}

fn split_context(fp: &DensityEvolution, grid: &SpatialGrid) -> Result<SplitContext, LabError> {
    if fp.xgrid.dim != 1 || fp.orientations != 1 || fp.joint {
        return Err(plan_err("model", "the Wasserstein splitting needs d = 1 and B = 1"));
    }
    let p = fp.xgrid.n;
    let columns: Vec<usize> =
        (0..grid.n).map(|i| reference_column(grid, fp.xgrid.side, i)).collect::<Option<Vec<_>>>().ok_or_else(|| {
            plan_err(
                "fp.side",
                format!("reference side {} must be an odd multiple of the particle side {}", p, grid.side),
            )
        })?;
    let centers = fp.ucells.centers();
    let xs: Vec<f64> = (0..p).map(|q| fp.xgrid.point(q)[0]).collect();
    let mut lattices = Vec::new();
    let mut node_laws = Vec::new();
    let mut riemann = Vec::new();
    for r in 0..fp.record_times.len() {
        let n_u = fp.ucells.n_u;
        let mut masses = Vec::with_capacity(p * n_u);
        let marg: Vec<Vec<f64>> = (0..p).map(|q| fp.marginal(r, q, 0)).collect();
        for m in &marg {
            masses.extend(m.iter().map(|v| v / p as f64));
        }
        lattices.push(LatticeDensity { columns: xs.clone(), levels: centers.clone(), masses });
        let laws: Vec<Vec<f64>> = columns.iter().map(|&c| marg[c].clone()).collect();
        // Pair every reference column with the particle node of its cell.
        let mut c_term = 0.0;
        for q in 0..p {
            let i = grid.cell_of(&[xs[q]]);
            let w = w_weighted_1d(&centers, &laws[i], &centers, &marg[q], 1)?;
            c_term += (w + (xs[q] - grid.point(i)[0]).abs()) / p as f64;
        }
        node_laws.push(laws);
        riemann.push(c_term);
    }
    Ok(SplitContext { lattices, node_laws, riemann, columns, centers })
}

/// Per-replica splitting terms at one record.
struct SplitSample {
    coupling: f64,
    subsampled: (f64, f64),
    sampling: f64,
    total: f64,
}

#[allow(clippy::too_many_arguments)]
fn split_sample(
    ctx: &SplitContext,
    grid: &SpatialGrid,
    m: usize,
    r: usize,
    particles: &[f64],
    mv: &[f64],
    seed: u64,
    key: u64,
) -> Result<SplitSample, LabError> {
    let n = grid.n;
    let atoms = |vals: &[f64]| -> Result<DiscreteMeasure, TransportError> {
        let mut pts = Vec::with_capacity(2 * n * m);
        for k in 0..m {
            for i in 0..n {
                pts.push(grid.point(i)[0]);
                pts.push(vals[k * n + i]);
            }
        }
        DiscreteMeasure::uniform(2, pts)
    };
    let fa = atoms(particles)?;
    let fb = atoms(mv)?;
    let coupling = coupling_upper_bound(&fa, &fb, GroundMetric::Product { dim_x: 1 })?;
    let subsampled = subsampled_w1(&fa, &fb, 1, 3, seed, key)?;
    let mut sampling = 0.0;
    let mut col = vec![0.0; m];
    let ones = vec![1.0; m];
    for i in 0..n {
        for k in 0..m {
            col[k] = mv[k * n + i];
        }
        sampling += w_weighted_1d(&col, &ones, &ctx.centers, &ctx.node_laws[r][i], 1)? / n as f64;
    }
    let w = 1.0 / (n * m) as f64;
    let points: Vec<(usize, f64, f64)> = (0..m)
        .flat_map(|k| (0..n).map(move |i| (i, k)))
        .map(|(i, k)| (ctx.columns[i], particles[k * n + i], w))
        .collect();
    let total = lattice_w1(&ctx.lattices[r], &points)?;
    Ok(SplitSample { coupling, subsampled, sampling, total })
}

struct ReplicaOutcome {
    sq_mean: f64,
    sq_mean_half: Option<f64>,
    ledger_ok: bool,
    split: Vec<SplitSample>,
}

struct NContext {
    grid: SpatialGrid,
    noise: CorrelatedNoiseField,
    source: ReferenceInteraction,
    split: Option<SplitContext>,
}

fn run_replica(
    plan: &ExperimentPlan,
    model: &ModelSpec,
    ctx: &NContext,
    m: usize,
    r: usize,
) -> Result<ReplicaOutcome, LabError> {
    let seed = replica_seed(plan.master_seed, r);
    let init = InitialFamily { spec: plan.initial.clone(), dim: plan.dim(), orientations: plan.orientations(), seed };
    let mut cfg = RunConfig::new(plan.horizon, plan.dt, seed);
    cfg.record_times = plan.record_times();
    let drivers = [Driver::Empirical, Driver::External(&ctx.source)];
    let run = run_lockstep(model, &ctx.grid, m, &ctx.noise, &init, &cfg, &drivers)?;
    let sq = run.sup_sq_diff.as_ref().expect("two systems ran");
    let sq_mean = sq.iter().sum::<f64>() / sq.len() as f64;
    let mut ledger_ok = run.runs.iter().all(|s| s.ledger.holds());
    let sq_mean_half = if plan.checks.dt_halving {
        let mut fine = cfg.clone();
        fine.refine_level = 1;
        let half = run_lockstep(model, &ctx.grid, m, &ctx.noise, &init, &fine, &drivers)?;
        ledger_ok &= half.runs.iter().all(|s| s.ledger.holds());
        let sq = half.sup_sq_diff.as_ref().expect("two systems ran");
        Some(sq.iter().sum::<f64>() / sq.len() as f64)
    } else {
        None
    };
    let mut split = Vec::new();
    if let Some(sc) = &ctx.split {
        let key = ((ctx.grid.n as u64) << 40) ^ ((m as u64) << 20) ^ r as u64;
        for rec in 0..run.runs[0].record_times.len() {
            split.push(split_sample(
                sc,
                &ctx.grid,
                m,
                rec,
                &run.runs[0].snapshots[rec],
                &run.runs[1].snapshots[rec],
                seed,
                key ^ ((rec as u64) << 56),
            )?);
        }
    }
    Ok(ReplicaOutcome { sq_mean, sq_mean_half, ledger_ok, split })
}

/// Square root of a replica mean, with the delta-method standard error.
fn root_mean(samples: &[f64]) -> (f64, f64) {
    let (mean, se) = mean_and_se(samples);
    let e = mean.max(0.0).sqrt();
    (e, if e > 0.0 { se / (2.0 * e) } else { 0.0 })
}

fn run_plan(plan: &ExperimentPlan, splitting: bool) -> Result<ConvergenceReport, LabError> {
    plan.validate()?;
    let model = plan.model_spec()?;
    let (fp, check) = reference_law(plan)?;
    let mut report = ConvergenceReport::empty(&plan.preset, plan.master_seed, plan.replicas);
    if let Some(change) = check.refinement_change {
        if change >= FP_REFINEMENT_TOL {
            report.valid = false;
            report.notes.push(format!("reference moments change by {change:.3e} under Δu halving"));
        }
    }
    report.reference = Some(check);
    let mut ns: Vec<usize> = plan.cells.iter().map(|c| c[0]).collect();
    ns.sort_unstable();
    ns.dedup();
    for n in ns {
        let grid = grid_locations(n, plan.dim())?;
        let eps = plan.epsilon.epsilon(n, plan.dim());
        let noise = build_field(&grid.points, plan.dim(), eps, plan.mollifier, plan.orientations())?;
        let source = ReferenceInteraction::new(&model, &fp, &grid)?;
        let split = if splitting { Some(split_context(&fp, &grid)?) } else { None };
        let ctx = NContext { grid, noise, source, split };
        for &[_, m] in plan.cells.iter().filter(|c| c[0] == n) {
            let outcomes: Vec<ReplicaOutcome> = (0..plan.replicas)
                .into_par_iter()
                .map(|r| run_replica(plan, &model, &ctx, m, r))
                .collect::<Result<_, _>>()?;
            let sq: Vec<f64> = outcomes.iter().map(|o| o.sq_mean).collect();
            let (error, stderr) = root_mean(&sq);
            let error_half_dt = if plan.checks.dt_halving {
                let half: Vec<f64> = outcomes.iter().map(|o| o.sq_mean_half.unwrap_or(f64::NAN)).collect();
                Some(root_mean(&half).0)
            } else {
                None
            };
            let cell =
                CellError { n, m, error, stderr, error_half_dt, ledger_ok: outcomes.iter().all(|o| o.ledger_ok) };
            if let Some(change) = cell.dt_change() {
                if change >= DT_HALVING_TOL {
                    report.valid = false;
                    report.notes.push(format!("N = {n}, M = {m}: halving dt changes e by {:.1}%", 100.0 * change));
                }
            }
            if !cell.ledger_ok {
                report.valid = false;
                report.notes.push(format!("N = {n}, M = {m}: reflection invariant violated"));
            }
            report.errors.push(cell);
            if let Some(sc) = &ctx.split {
                for (rec, &t) in fp.record_times.iter().enumerate() {
                    let col = |f: &dyn Fn(&SplitSample) -> f64| -> Vec<f64> {
                        outcomes.iter().map(|o| f(&o.split[rec])).collect()
                    };
                    let (coupling, coupling_se) = mean_and_se(&col(&|s| s.coupling));
                    let (coupling_subsampled, _) = mean_and_se(&col(&|s| s.subsampled.0));
                    let coupling_subsampled_spread = col(&|s| s.subsampled.1).iter().fold(0.0f64, |a, &v| a.max(v));
                    let (sampling, sampling_se) = mean_and_se(&col(&|s| s.sampling));
                    let (total, total_se) = mean_and_se(&col(&|s| s.total));
                    let triangle_slack = outcomes
                        .iter()
                        .map(|o| {
                            let s = &o.split[rec];
                            s.coupling + s.sampling + sc.riemann[rec] - s.total
                        })
                        .fold(f64::INFINITY, f64::min);
                    report.splitting.push(SplitRow {
                        n,
                        m,
                        t,
                        coupling,
                        coupling_se,
                        coupling_subsampled,
                        coupling_subsampled_spread,
                        sampling,
                        sampling_se,
                        riemann: sc.riemann[rec],
                        total,
                        total_se,
                        triangle_slack,
                    });
                }
            }
        }
    }
    add_slopes(plan, &mut report);
    Ok(report)
}

fn add_slopes(plan: &ExperimentPlan, report: &mut ConvergenceReport) {
    let ns: Vec<usize> = plan.cells.iter().map(|c| c[0]).collect();
    let ms: Vec<usize> = plan.cells.iter().map(|c| c[1]).collect();
    let fixed_n = ns.iter().all(|&n| n == ns[0]);
    let fixed_m = ms.iter().all(|&m| m == ms[0]);
    let mut fits = Vec::new();
    let err_points = |by_m: bool| -> Vec<(f64, f64, f64)> {
        report.errors.iter().map(|c| (if by_m { c.m } else { c.n } as f64, c.error, c.stderr)).collect()
    };
    if fixed_n && !fixed_m {
        fits.push(("error-vs-M".to_string(), err_points(true)));
    }
    if fixed_m && !fixed_n {
        fits.push(("error-vs-N".to_string(), err_points(false)));
    }
    if fixed_n && !fixed_m && !report.splitting.is_empty() {
        let last = report.splitting.iter().map(|s| s.t).fold(f64::NEG_INFINITY, f64::max);
        let pts: Vec<(f64, f64, f64)> =
            report.splitting.iter().filter(|s| s.t == last).map(|s| (s.m as f64, s.total, s.total_se)).collect();
        fits.push(("total-w1-vs-M".to_string(), pts));
    }
    for (name, pts) in fits {
        match fit_loglog_slope(&pts) {
            Ok(f) => report.slopes.push((name, f)),
            Err(e) => report.notes.push(format!("{name}: {e}")),
        }
    }
}

/// Coupled particle-versus-McKean–Vlasov errors for every cell of the plan.
pub fn run_coupled_error(plan: &ExperimentPlan) -> Result<ConvergenceReport, LabError> {
    run_plan(plan, false)
}

/// Coupled errors plus the three-term Wasserstein splitting at every record
/// time. Needs `d = 1`, `B = 1` and a reference side that is an odd multiple
/// of every particle side.
pub fn run_empirical_measure(plan: &ExperimentPlan) -> Result<ConvergenceReport, LabError> {
    run_plan(plan, true)
}

/// Weighted least squares of `log error` on `log scale`.
///
/// Weights are `(error / stderr)²`, the inverse variance of `log error` to
/// first order; equal weights are used when any standard error is zero.
pub fn fit_loglog_slope(points: &[(f64, f64, f64)]) -> Result<SlopeFit, LabError> {
    if points.len() < 4 {
        return Err(LabError::TooFewPoints(points.len()));
    }
    for &(s, e, _) in points {
        if !(e > 0.0) || !(s > 0.0) {
            return Err(LabError::Nonpositive { scale: s, value: e });
        }
    }
    let equal = points.iter().any(|p| !(p.2 > 0.0));
    let w: Vec<f64> = points.iter().map(|&(_, e, se)| if equal { 1.0 } else { (e / se).powi(2) }).collect();
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(a, b)| a * (b - xm).powi(2)).sum();
    let sxy: f64 = w.iter().zip(x.iter().zip(&y)).map(|(a, (b, c))| a * (b - xm) * (c - ym)).sum();
    if sxx <= 0.0 {
        return Err(plan_err("scale", "all scales are equal"));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let dof = points.len() - 2;
    let rss: f64 = w.iter().zip(x.iter().zip(&y)).map(|(a, (b, c))| a * (c - intercept - slope * b).powi(2)).sum();
    let slope_stderr = (rss / dof as f64 / sxx).sqrt();
    let q = StudentsT::new(0.0, 1.0, dof as f64).map(|t| t.inverse_cdf(0.975)).unwrap_or(f64::NAN);
    Ok(SlopeFit {
        slope,
        intercept,
        slope_stderr,
        ci_low: slope - q * slope_stderr,
        ci_high: slope + q * slope_stderr,
        points: points.len(),
    })
}

/// Rendered rate table.
#[derive(Clone, Debug, PartialEq)]
pub struct RateTable {
    /// Human-readable aligned table.
    pub text: String,
    /// Comma-separated rows with a header, every number in lossless form.
    pub csv: String,
    pub summary: serde_json::Value,
}

pub const RATE_COLUMNS: [&str; 5] = ["N", "M", "error", "stderr", "error_half_dt"];

/// Formats a float with 17 significant digits.
pub fn lossless(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn rate_table(report: &ConvergenceReport) -> RateTable {
    let mut text = format!("{:>6} {:>6} {:>24} {:>24} {:>24}\n", "N", "M", "e(N,M)", "stderr", "e at dt/2");
    let mut csv = RATE_COLUMNS.join(",");
    csv.push('\n');
    for c in &report.errors {
        let half = c.error_half_dt.map(lossless).unwrap_or_default();
        text.push_str(&format!(
            "{:>6} {:>6} {:>24} {:>24} {:>24}\n",
            c.n,
            c.m,
            lossless(c.error),
            lossless(c.stderr),
            if half.is_empty() { "-".into() } else { half.clone() }
        ));
        csv.push_str(&format!("{},{},{},{},{}\n", c.n, c.m, lossless(c.error), lossless(c.stderr), half));
    }
    for (name, f) in &report.slopes {
        text.push_str(&format!(
            "{name}: slope {:.4} ± {:.4} (95% CI [{:.4}, {:.4}], {} points)\n",
            f.slope, f.slope_stderr, f.ci_low, f.ci_high, f.points
        ));
    }
    let summary = serde_json::json!({
        "preset": report.preset,
        "master_seed": report.master_seed,
        "replicas": report.replicas,
        "valid": report.valid,
        "slopes": report.slopes.iter().map(|(n, f)| serde_json::json!({"name": n, "fit": f})).collect::<Vec<_>>(),
        "notes": report.notes,
    });
    RateTable { text, csv, summary }
}

/// Parses the CSV of [`rate_table`] back into `(N, M, error, stderr, error_half_dt)` rows.
pub fn parse_rate_csv(csv: &str) -> Result<Vec<(usize, usize, f64, f64, Option<f64>)>, LabError> {
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    if header != RATE_COLUMNS.join(",") {
        return Err(plan_err("csv", format!("unexpected header {header:?}")));
    }
    let bad = |l: &str| plan_err("csv", format!("malformed row {l:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            let half = if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad(l))?) };
            Ok((
                f[0].parse().map_err(|_| bad(l))?,
                f[1].parse().map_err(|_| bad(l))?,
                f[2].parse().map_err(|_| bad(l))?,
                f[3].parse().map_err(|_| bad(l))?,
                half,
            ))
        })
        .collect()
}

/// Reflected Ornstein–Uhlenbeck check against the closed-form stationary law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuOracleConfig {
    pub c: f64,
    pub sigma: f64,
    pub tau: f64,
    pub horizon: f64,
    pub n_u: usize,
    pub u_max: f64,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for OuOracleConfig {
    fn default() -> Self {
        Self {
            c: 0.3,
            sigma: 0.5,
            tau: 1.0,
            horizon: 10.0,
            n_u: 400,
            u_max: 3.0,
            n: 100,
            m: 100,
            dt: 1.0 / 400.0,
            seed: crate::DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuOracleReport {
    /// `L1` distance of the Fokker–Planck cell masses from the oracle at the horizon.
    pub fp_l1: f64,
    /// `W1` between all `N·M` particle values at the horizon and the oracle.
    pub particle_w1: f64,
    pub fp_dt: f64,
    pub atoms: usize,
    pub ledger_ok: bool,
}

/// Runs the Fokker–Planck solver and the particle system with `φ ≡ c` from
/// the deterministic start `softplus(0)` and compares both with the oracle.
pub fn ou_oracle(cfg: &OuOracleConfig) -> Result<OuOracleReport, LabError> {
    let params = crate::model::ou_params(cfg.c, cfg.sigma, cfg.tau);
    let model = build_concrete_model(&params)?;
    let ucells = UCells::new(cfg.n_u, cfg.u_max)?;
    let oracle = crate::meanfield::reflected_ou_stationary(cfg.c, cfg.sigma, cfg.tau, &ucells);
    let spec = InitialDataSpec { alpha: 1.0, n_modes: 0, amplitude: 0.0, offset: 0.0, profile: LacunaryProfile::NONE };

    let single = grid_locations(1, 1)?;
    let f0 = initial_density(&spec, &single, 1, &ucells);
    let fp_dt = suggest_dt(&model, &single, &ucells, &f0, cfg.horizon, 1, 0.5)?;
    let fp = solve_marginal_fp(&model, &single, &ucells, &f0, &FpConfig::new(cfg.horizon, fp_dt, vec![cfg.horizon]))?;
    let last = fp.marginal(fp.record_times.len() - 1, 0, 0);
    let fp_l1 = last.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).sum();

    let grid = grid_locations(cfg.n, 1)?;
    let noise = build_field(&grid.points, 1, default_epsilon(cfg.n, 1), MollifierProfile::Bump, 1)?;
    let init = InitialFamily { spec, dim: 1, orientations: 1, seed: cfg.seed };
    let run = crate::particles::simulate_system(
        &model,
        &grid,
        cfg.m,
        &noise,
        &init,
        &RunConfig::new(cfg.horizon, cfg.dt, cfg.seed),
    )?;
    let edges: Vec<f64> = (0..=cfg.n_u).map(|i| ucells.edge(i)).collect();
    let values = &run.snapshots[run.snapshots.len() - 1];
    let particle_w1 = crate::transport::w1_samples_vs_histogram(values, &edges, &oracle)?;
    Ok(OuOracleReport { fp_l1, particle_w1, fp_dt: fp.dt, atoms: values.len(), ledger_ok: run.ledger.holds() })
}

/// One-dimensional single-orientation network used by the rate presets.
pub fn line_network() -> GridCellParams {
    GridCellParams {
        dim: 1,
        orientations: 1,
        tau: vec![TimeConstant::Constant { value: 1.0 }],
        sigma: 0.3,
        firing: FiringRate::Softplus,
        kernels: vec![Kernel::MexicanHat { a_e: 1.0, s_e: 0.1, a_i: 0.6, s_i: 0.25, shift: vec![] }],
        input: ExternalInput::Constant { values: vec![0.5] },
    }
}

/// Named experiment plans.
pub fn preset_plan(name: &str) -> Option<ExperimentPlan> {
    let base = ExperimentPlan {
        preset: name.into(),
        model: line_network(),
        initial: InitialDataSpec {
            alpha: 1.0,
            n_modes: 32,
            amplitude: 0.5,
            offset: 0.0,
            profile: LacunaryProfile::NONE,
        },
        cells: vec![[64, 8], [64, 16], [64, 32], [64, 64], [64, 128]],
        horizon: 1.0,
        dt: 1.0 / 128.0,
        epsilon: EpsilonPolicy::Linked,
        mollifier: MollifierProfile::Bump,
        replicas: 64,
        master_seed: crate::DEFAULT_SEED,
        fp: FpResolution { side: None, n_u: 240, u_max: 3.0, dt: None },
        record_times: None,
        checks: PlanChecks { dt_halving: true, fp_refinement: true },
    };
    match name {
        "rate-in-M" => Some(base),
        "rate-in-N" => Some(ExperimentPlan {
            // Wide enough that four nodes resolve the kernel, with net positive mass.
            model: GridCellParams {
                kernels: vec![Kernel::MexicanHat { a_e: 1.0, s_e: 0.25, a_i: 0.3, s_i: 0.4, shift: vec![] }],
                ..line_network()
            },
            initial: InitialDataSpec {
                alpha: 0.5,
                n_modes: 0,
                amplitude: 0.0,
                offset: 0.0,
                profile: LacunaryProfile { amplitude: 1.0, levels: 8 },
            },
            cells: vec![[4, 256], [16, 256], [64, 256], [256, 256]],
            ..base
        }),
        "empirical-measure" => Some(ExperimentPlan {
            record_times: Some(vec![0.5, 1.0]),
            checks: PlanChecks { dt_halving: false, fp_refinement: true },
            ..base
        }),
        _ => None,
    }
}

pub const PRESET_PLANS: [&str; 3] = ["rate-in-M", "rate-in-N", "empirical-measure"];

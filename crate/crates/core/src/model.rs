//! Drift and diffusion coefficients with mean-field dependence.
//!
//! Each coefficient has the form
//!
//! ```text
//! c^β(x, r, u, f) = c0^β(x, r, u) + φ^β(x, r, ∫ c1^β(x, y, r, u, v) f(dy, dv))
//! ```
//!
//! where `f` is a probability measure on `Q × R^B`. The grid-cell network is
//! the special case with a convolution interaction
//! `c1 = (1/B) Σ_γ K^γ(x − y) v^γ`, `c0 = −u^β/τ^β(x)` and
//! `φ = firing_rate(B^β(x, r) + ·)/τ^β(x)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("kernel widths must be positive, got s_e={s_e}, s_i={s_i}")]
    NonPositiveWidth { s_e: f64, s_i: f64 },
    #[error("non-finite {stage} in component {component}")]
    NonFinite { component: usize, stage: &'static str },
    #[error("invalid parameter `{field}`: {reason}")]
    BadParameter { field: &'static str, reason: String },
    #[error("measure weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),
    #[error("regularity budget must be at least 100 samples, got {0}")]
    SmallBudget(usize),
}

fn bad(field: &'static str, reason: impl Into<String>) -> ModelError {
    ModelError::BadParameter { field, reason: reason.into() }
}

/// Nonlinearity applied to the total synaptic input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FiringRate {
    Softplus,
    Relu,
    /// `φ ≡ value`; turns the network into independent reflected OU units.
    Constant {
        value: f64,
    },
    Linear {
        slope: f64,
    },
}

impl FiringRate {
    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            FiringRate::Softplus => softplus(z),
            FiringRate::Relu => z.max(0.0),
            FiringRate::Constant { value } => value,
            FiringRate::Linear { slope } => slope * z,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            FiringRate::Softplus | FiringRate::Relu => 1.0,
            FiringRate::Constant { .. } => 0.0,
            FiringRate::Linear { slope } => slope.abs(),
        }
    }

    /// `sup_{|z| ≤ bound} |φ(z)|`.
    pub fn bound(&self, bound: f64) -> f64 {
        match *self {
            FiringRate::Softplus => softplus(bound),
            FiringRate::Relu => bound.max(0.0),
            FiringRate::Constant { value } => value.abs(),
            FiringRate::Linear { slope } => slope.abs() * bound,
        }
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on `(0, ∞)`.
pub fn softplus_inv(v: f64) -> f64 {
    if v <= 0.0 {
        f64::NEG_INFINITY
    } else if v > 30.0 {
        v + (-(-v).exp()).ln_1p()
    } else {
        (-(-v).exp_m1()).ln() + v
    }
}

/// Difference of Gaussians `A_e e^{−|x|²/s_e²} − A_i e^{−|x|²/s_i²}`.
pub fn mexican_hat(x: &[f64], a_e: f64, s_e: f64, a_i: f64, s_i: f64) -> Result<f64, ModelError> {
    if !(s_e > 0.0 && s_i > 0.0) {
        return Err(ModelError::NonPositiveWidth { s_e, s_i });
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok(a_e * (-r2 / (s_e * s_e)).exp() - a_i * (-r2 / (s_i * s_i)).exp())
}

/// User-supplied kernel with declared bounds.
#[derive(Clone)]
pub struct CustomKernel {
    pub f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub sup: f64,
    pub lipschitz: f64,
}

impl fmt::Debug for CustomKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomKernel").field("sup", &self.sup).field("lipschitz", &self.lipschitz).finish()
    }
}

/// Interaction kernel `K^γ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Kernel {
    Zero,
    /// Mexican hat centred at `shift` (empty shift means the origin).
    MexicanHat {
        a_e: f64,
        s_e: f64,
        a_i: f64,
        s_i: f64,
        #[serde(default)]
        shift: Vec<f64>,
    },
    #[serde(skip)]
    Custom(CustomKernel),
}

impl Kernel {
    pub fn validate(&self, dim: usize) -> Result<(), ModelError> {
        match self {
            Kernel::MexicanHat { s_e, s_i, shift, .. } => {
                if !(*s_e > 0.0 && *s_i > 0.0) {
                    return Err(ModelError::NonPositiveWidth { s_e: *s_e, s_i: *s_i });
                }
                if !shift.is_empty() && shift.len() != dim {
                    return Err(ModelError::Dimension(format!("kernel shift has {} entries, d = {dim}", shift.len())));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Kernel::Zero => 0.0,
            Kernel::MexicanHat { a_e, s_e, a_i, s_i, shift } => {
                let r2: f64 = if shift.is_empty() {
                    z.iter().map(|v| v * v).sum()
                } else {
                    z.iter().zip(shift).map(|(v, s)| (v - s) * (v - s)).sum()
                };
                a_e * (-r2 / (s_e * s_e)).exp() - a_i * (-r2 / (s_i * s_i)).exp()
            }
            Kernel::Custom(c) => (c.f)(z),
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            Kernel::Zero => 0.0,
            Kernel::MexicanHat { a_e, a_i, .. } => a_e.abs() + a_i.abs(),
            Kernel::Custom(c) => c.sup,
        }
    }

    /// Bound on the gradient norm.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Kernel::Zero => 0.0,
            // max_r |d/dr A e^{−r²/s²}| = A √2 e^{−1/2} / s.
            Kernel::MexicanHat { a_e, s_e, a_i, s_i, .. } => {
                let c = 2f64.sqrt() * (-0.5f64).exp();
                c * (a_e.abs() / s_e + a_i.abs() / s_i)
            }
            Kernel::Custom(c) => c.lipschitz,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Kernel::Zero)
    }
}

/// One term `amplitude · cos(2π ⟨k, x⟩ + phase)` of an external input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierTerm {
    pub orientation: usize,
    pub amplitude: f64,
    pub wavevector: Vec<f64>,
    #[serde(default)]
    pub phase: f64,
}

/// External input `B^β(x, r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExternalInput {
    Constant { values: Vec<f64> },
    Fourier { offset: Vec<f64>, terms: Vec<FourierTerm> },
}

impl ExternalInput {
    pub fn eval(&self, x: &[f64], beta: usize) -> f64 {
        match self {
            ExternalInput::Constant { values } => values[beta],
            ExternalInput::Fourier { offset, terms } => {
                let mut v = offset[beta];
                for t in terms.iter().filter(|t| t.orientation == beta) {
                    let phase: f64 = t.wavevector.iter().zip(x).map(|(k, xi)| k * xi).sum();
                    v += t.amplitude * (2.0 * PI * phase + t.phase).cos();
                }
                v
            }
        }
    }

    fn offsets(&self) -> &[f64] {
        match self {
            ExternalInput::Constant { values } => values,
            ExternalInput::Fourier { offset, .. } => offset,
        }
    }

    /// `sup |B|` over `Q`.
    pub fn sup(&self) -> f64 {
        let mut s = self.offsets().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if let ExternalInput::Fourier { terms, .. } = self {
            s += terms.iter().map(|t| t.amplitude.abs()).sum::<f64>();
        }
        s
    }

    /// Lipschitz bound in `x`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            ExternalInput::Constant { .. } => 0.0,
            ExternalInput::Fourier { terms, .. } => terms
                .iter()
                .map(|t| t.amplitude.abs() * 2.0 * PI * t.wavevector.iter().map(|k| k * k).sum::<f64>().sqrt())
                .sum(),
        }
    }
}

/// Membrane time constant `τ^β(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimeConstant {
    Constant {
        value: f64,
    },
    /// `clamp(base + ⟨gradient, x⟩, min, max)`.
    Affine {
        base: f64,
        gradient: Vec<f64>,
        min: f64,
        max: f64,
    },
}

impl TimeConstant {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TimeConstant::Constant { value } => *value,
            TimeConstant::Affine { base, gradient, min, max } => {
                let v = base + gradient.iter().zip(x).map(|(g, xi)| g * xi).sum::<f64>();
                v.clamp(*min, *max)
            }
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            TimeConstant::Constant { value } => (*value, *value),
            TimeConstant::Affine { min, max, .. } => (*min, *max),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            TimeConstant::Constant { .. } => 0.0,
            TimeConstant::Affine { gradient, .. } => gradient.iter().map(|g| g * g).sum::<f64>().sqrt(),
        }
    }
}

/// Parameters of the grid-cell network.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCellParams {
    pub dim: usize,
    pub orientations: usize,
    /// One entry per orientation, or a single entry shared by all.
    pub tau: Vec<TimeConstant>,
    pub sigma: f64,
    pub firing: FiringRate,
    /// One kernel per orientation `γ`.
    pub kernels: Vec<Kernel>,
    pub input: ExternalInput,
}

impl GridCellParams {
    pub fn tau_for(&self, beta: usize) -> &TimeConstant {
        if self.tau.len() == 1 {
            &self.tau[0]
        } else {
            &self.tau[beta]
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(1..=3).contains(&self.dim) {
            return Err(bad("dim", format!("must be 1, 2 or 3, got {}", self.dim)));
        }
        let b = self.orientations;
        if b == 0 {
            return Err(bad("orientations", "must be at least 1"));
        }
        if self.tau.len() != 1 && self.tau.len() != b {
            return Err(bad("tau", format!("expected 1 or {b} entries, got {}", self.tau.len())));
        }
        for t in &self.tau {
            let (lo, hi) = t.bounds();
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(bad("tau", format!("needs 0 < inf tau <= sup tau < inf, got [{lo}, {hi}]")));
            }
            if let TimeConstant::Affine { gradient, .. } = t {
                if gradient.len() != self.dim {
                    return Err(bad("tau", "affine gradient length must equal dim"));
                }
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(bad("sigma", format!("must be nonnegative, got {}", self.sigma)));
        }
        if self.kernels.len() != b {
            return Err(bad("kernels", format!("expected {b} kernels, got {}", self.kernels.len())));
        }
        for k in &self.kernels {
            k.validate(self.dim)?;
        }
        let offsets = self.input.offsets();
        if offsets.len() != b {
            return Err(bad("input", format!("expected {b} values, got {}", offsets.len())));
        }
        if let ExternalInput::Fourier { terms, .. } = &self.input {
            for t in terms {
                if t.orientation >= b || t.wavevector.len() != self.dim {
                    return Err(bad("input", "Fourier term orientation or wavevector out of range"));
                }
            }
        }
        Ok(())
    }

    fn tau_min(&self) -> f64 {
        self.tau.iter().map(|t| t.bounds().0).fold(f64::INFINITY, f64::min)
    }

    fn tau_lipschitz(&self) -> f64 {
        self.tau.iter().map(TimeConstant::lipschitz).fold(0.0, f64::max)
    }

    fn kernel_sup(&self) -> f64 {
        self.kernels.iter().map(Kernel::sup).fold(0.0, f64::max)
    }

    fn kernel_lipschitz(&self) -> f64 {
        self.kernels.iter().map(Kernel::lipschitz).fold(0.0, f64::max)
    }
}

/// `c0^β(x, r, u)`.
pub type BaseFn = Arc<dyn Fn(&[f64], f64, &[f64], usize) -> f64 + Send + Sync>;
/// `c1^β(x, y, r, u, v)`.
pub type PairFn = Arc<dyn Fn(&[f64], &[f64], f64, &[f64], &[f64], usize) -> f64 + Send + Sync>;
/// `φ^β(x, r, z)`.
pub type OuterFn = Arc<dyn Fn(&[f64], f64, f64, usize) -> f64 + Send + Sync>;

/// How the coefficient depends on the measure.
#[derive(Clone)]
pub enum Interaction {
    None,
    /// `c1 = weight · Σ_γ K^γ(x − y) v^γ`, the same for every `β`.
    Convolution {
        kernels: Vec<Kernel>,
        weight: f64,
    },
    General(PairFn),
}

impl Interaction {
    /// True when the interaction vanishes identically.
    pub fn is_null(&self) -> bool {
        match self {
            Interaction::None => true,
            Interaction::Convolution { kernels, weight } => *weight == 0.0 || kernels.iter().all(Kernel::is_zero),
            Interaction::General(_) => false,
        }
    }
}

#[derive(Clone)]
pub struct Coefficient {
    pub base: BaseFn,
    pub interaction: Interaction,
    pub outer: OuterFn,
    /// `c0^β` and `φ^β` depend on `u` only through `u^β`.
    pub separable: bool,
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.interaction {
            Interaction::None => "none",
            Interaction::Convolution { .. } => "convolution",
            Interaction::General(_) => "general",
        };
        f.debug_struct("Coefficient").field("interaction", &kind).field("separable", &self.separable).finish()
    }
}

/// Declared structural constants (Lipschitz/Hölder `L`, growth `C`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    pub lipschitz: f64,
    pub growth: f64,
}

/// A model in the general mean-field form.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub orientations: usize,
    /// Hölder exponent in `x` of the coefficients.
    pub alpha: f64,
    pub drift: Coefficient,
    pub diffusion: Coefficient,
    pub declared: DeclaredConstants,
    /// Activity range `[0, activity_box]` on which the declared constants hold.
    pub activity_box: f64,
    pub params: Option<GridCellParams>,
}

/// A measure on `Q × R^B` that can be integrated against.
pub trait MeasureView {
    fn dim(&self) -> usize;
    fn orientations(&self) -> usize;
    fn for_each_atom(&self, f: &mut dyn FnMut(&[f64], &[f64], f64));

    fn integrate(&self, g: &dyn Fn(&[f64], &[f64]) -> f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_atom(&mut |y, v, w| acc += w * g(y, v));
        acc
    }
}

/// Finite weighted point set on `Q × R^B`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMeasure {
    pub dim: usize,
    pub orientations: usize,
    /// Row-major `n × d`.
    pub points: Vec<f64>,
    /// Row-major `n × B`.
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PointMeasure {
    pub fn new(
        dim: usize,
        orientations: usize,
        points: Vec<f64>,
        values: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n = weights.len();
        if points.len() != n * dim || values.len() != n * orientations {
            return Err(ModelError::Dimension("point/value arrays do not match weight count".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
            return Err(ModelError::WeightSum(total));
        }
        Ok(Self { dim, orientations, points, values, weights })
    }

    /// Uniform weights.
    pub fn uniform(dim: usize, orientations: usize, points: Vec<f64>, values: Vec<f64>) -> Result<Self, ModelError> {
        let n = values.len() / orientations.max(1);
        Self::new(dim, orientations, points, values, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl MeasureView for PointMeasure {
    fn dim(&self) -> usize {
        self.dim
    }

    fn orientations(&self) -> usize {
        self.orientations
    }

    fn for_each_atom(&self, f: &mut dyn FnMut(&[f64], &[f64], f64)) {
        let (d, b) = (self.dim, self.orientations);
        for (a, &w) in self.weights.iter().enumerate() {
            f(&self.points[a * d..(a + 1) * d], &self.values[a * b..(a + 1) * b], w);
        }
    }
}

/// `∫ c1^β f` for every `β`.
pub fn interaction_integral(
    interaction: &Interaction,
    x: &[f64],
    r: f64,
    u: &[f64],
    f: &dyn MeasureView,
    out: &mut [f64],
) {
    match interaction {
        Interaction::None => out.iter_mut().for_each(|v| *v = 0.0),
        Interaction::Convolution { kernels, weight } => {
            let mut acc = 0.0;
            let mut diff = vec![0.0; x.len()];
            f.for_each_atom(&mut |y, v, w| {
                for (dz, (xi, yi)) in diff.iter_mut().zip(x.iter().zip(y)) {
                    *dz = xi - yi;
                }
                let s: f64 = kernels.iter().zip(v).map(|(k, vg)| k.eval(&diff) * vg).sum();
                acc += w * s;
            });
            out.iter_mut().for_each(|o| *o = weight * acc);
        }
        Interaction::General(c1) => {
            for (beta, o) in out.iter_mut().enumerate() {
                *o = f.integrate(&|y, v| c1(x, y, r, u, v, beta));
            }
        }
    }
}

fn eval_coefficient(
    c: &Coefficient,
    x: &[f64],
    r: f64,
    u: &[f64],
    f: &dyn MeasureView,
    label: &'static str,
) -> Result<Vec<f64>, ModelError> {
    let b = u.len();
    let mut z = vec![0.0; b];
    interaction_integral(&c.interaction, x, r, u, f, &mut z);
    let mut out = vec![0.0; b];
    for beta in 0..b {
        if !z[beta].is_finite() {
            return Err(ModelError::NonFinite { component: beta, stage: "interaction integral" });
        }
        let v = (c.base)(x, r, u, beta) + (c.outer)(x, r, z[beta], beta);
        if !v.is_finite() {
            return Err(ModelError::NonFinite { component: beta, stage: label });
        }
        out[beta] = v;
    }
    Ok(out)
}

/// Drift vector `b(x, r, u, f)`.
pub fn eval_drift(
    model: &ModelSpec,
    x: &[f64],
    r: f64,
    u: &[f64],
    f: &dyn MeasureView,
) -> Result<Vec<f64>, ModelError> {
    check_shapes(model, x, u, f)?;
    eval_coefficient(&model.drift, x, r, u, f, "drift")
}

/// Diffusion vector `σ(x, r, u, f)` (one scalar per orientation).
pub fn eval_diffusion(
    model: &ModelSpec,
    x: &[f64],
    r: f64,
    u: &[f64],
    f: &dyn MeasureView,
) -> Result<Vec<f64>, ModelError> {
    check_shapes(model, x, u, f)?;
    eval_coefficient(&model.diffusion, x, r, u, f, "diffusion")
}

fn check_shapes(model: &ModelSpec, x: &[f64], u: &[f64], f: &dyn MeasureView) -> Result<(), ModelError> {
    if x.len() != model.dim || u.len() != model.orientations {
        return Err(ModelError::Dimension(format!(
            "x has {} entries (d = {}), u has {} (B = {})",
            x.len(),
            model.dim,
            u.len(),
            model.orientations
        )));
    }
    if f.dim() != model.dim || f.orientations() != model.orientations {
        return Err(ModelError::Dimension("measure does not live on Q x R^B of the model".into()));
    }
    Ok(())
}

/// Builds the grid-cell network as a [`ModelSpec`].
pub fn build_concrete_model(params: &GridCellParams) -> Result<ModelSpec, ModelError> {
    params.validate()?;
    let b = params.orientations;
    let p = Arc::new(params.clone());

    let pb = p.clone();
    let drift_base: BaseFn = Arc::new(move |x, _r, u, beta| -u[beta] / pb.tau_for(beta).eval(x));
    let po = p.clone();
    let drift_outer: OuterFn =
        Arc::new(move |x, _r, z, beta| po.firing.eval(po.input.eval(x, beta) + z) / po.tau_for(beta).eval(x));
    let ps = p.clone();
    let diff_base: BaseFn = Arc::new(move |x, _r, _u, beta| ps.sigma / ps.tau_for(beta).eval(x));
    let diff_outer: OuterFn = Arc::new(|_, _, _, _| 0.0);

    let declared = concrete_constants(params, 1.0, DEFAULT_ACTIVITY_BOX);
    Ok(ModelSpec {
        name: "gridcell-concrete".into(),
        dim: params.dim,
        orientations: b,
        alpha: 1.0,
        drift: Coefficient {
            base: drift_base,
            interaction: Interaction::Convolution { kernels: params.kernels.clone(), weight: 1.0 / b as f64 },
            outer: drift_outer,
            separable: true,
        },
        diffusion: Coefficient { base: diff_base, interaction: Interaction::None, outer: diff_outer, separable: true },
        declared,
        activity_box: DEFAULT_ACTIVITY_BOX,
        params: Some(params.clone()),
    })
}

pub const DEFAULT_ACTIVITY_BOX: f64 = 4.0;

/// Analytic upper bounds on the structural constants of the network on the
/// activity box `[0, U]^B`, in the Hölder class `alpha`.
pub fn concrete_constants(params: &GridCellParams, alpha: f64, activity_box: f64) -> DeclaredConstants {
    let b = params.orientations as f64;
    let diam = (params.dim as f64).sqrt();
    let holder = |lip: f64| lip * diam.powf(1.0 - alpha);
    let tmin = params.tau_min();
    let inv_tau_lip = params.tau_lipschitz() / (tmin * tmin);
    let u_norm = activity_box * b.sqrt();
    let kmax = params.kernel_sup();
    let klip = params.kernel_lipschitz();
    let lphi = params.firing.lipschitz();
    let z_max = kmax * u_norm;
    let arg_max = params.input.sup() + z_max;
    let phi_max = params.firing.bound(arg_max).max(params.firing.bound(-arg_max));

    let l0 = (1.0 / tmin).max((u_norm + b.sqrt() * params.sigma) * holder(inv_tau_lip));
    let l1 = kmax.max(b.sqrt() * u_norm * holder(klip) * 2.0);
    let l_outer = (lphi / tmin).max(lphi * holder(params.input.lipschitz()) / tmin + phi_max * holder(inv_tau_lip));
    let lipschitz = l0.max(l1).max(l_outer);

    let g0 = (1.0f64).max(b.sqrt() * params.sigma) / tmin;
    let g1 = kmax;
    let g_outer = (lphi * params.input.sup().max(1.0) + params.firing.eval(0.0).abs()) / tmin + lphi / tmin;
    DeclaredConstants { lipschitz, growth: g0.max(g1).max(g_outer) }
}

/// Outcome of the sampled regularity check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegularityReport {
    pub samples: usize,
    pub lipschitz_hat: f64,
    pub growth_hat: f64,
    /// Growth estimate on each sampling box, smallest box first.
    pub growth_by_box: Vec<(f64, f64)>,
    pub lipschitz_declared: f64,
    pub growth_declared: f64,
    /// Sampled Hölder/Lipschitz quotients stay within `1.05 × L`.
    pub alpha_consistency: bool,
    /// Sampled growth ratios stay within `1.05 × C` on every box.
    pub growth_ok: bool,
}

const SLACK: f64 = 1.05;

/// Monte Carlo estimates of the structural constants.
///
/// Pairs are sampled in `Q × [0, U]^B` with separations spread over many
/// scales, so that a coefficient rougher than the declared exponent shows up
/// as a quotient that grows as the separation shrinks. Growth is probed on
/// boxes `U, 4U, 16U` to expose superlinear coefficients.
pub fn estimate_regularity_constants(
    model: &ModelSpec,
    budget: usize,
    seed: u64,
) -> Result<RegularityReport, ModelError> {
    if budget < 100 {
        return Err(ModelError::SmallBudget(budget));
    }
    let d = model.dim;
    let b = model.orientations;
    let alpha = model.alpha;
    let ubox = model.activity_box;
    let mut rng = stream(seed, Purpose::Regularity, 0, 0, 0);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dist = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();

    let mut lip_hat = 0.0f64;
    let mut growth_by_box = Vec::new();
    let vec_of = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * scale).collect()
    };
    let perturb = |rng: &mut rand_chacha::ChaCha8Rng, base: &[f64], lo: f64, hi: f64| -> Vec<f64> {
        let h = 10f64.powf(-8.0 * rng.gen::<f64>()) * 0.1;
        base.iter().map(|&v| (v + h * (2.0 * rng.gen::<f64>() - 1.0)).clamp(lo, hi)).collect()
    };

    let coefs = [&model.drift, &model.diffusion];
    let base_vec =
        |c: &&Coefficient, x: &[f64], u: &[f64]| -> Vec<f64> { (0..b).map(|beta| (c.base)(x, 0.0, u, beta)).collect() };

    for _ in 0..budget {
        // Pair quotient for (c0 of drift, c0 of diffusion) jointly.
        let x = vec_of(&mut rng, d, 1.0);
        let u = vec_of(&mut rng, b, ubox);
        let x2 = if rng.gen::<bool>() { perturb(&mut rng, &x, 0.0, 1.0) } else { x.clone() };
        let u2 = if rng.gen::<bool>() { perturb(&mut rng, &u, 0.0, ubox) } else { vec_of(&mut rng, b, ubox) };
        let denom = dist(&x, &x2).powf(alpha) + dist(&u, &u2);
        if denom > 0.0 {
            let num: f64 = coefs
                .iter()
                .map(|c| {
                    let a1 = base_vec(c, &x, &u);
                    let a2 = base_vec(c, &x2, &u2);
                    norm(&a1.iter().zip(&a2).map(|(p, q)| p - q).collect::<Vec<_>>())
                })
                .sum();
            lip_hat = lip_hat.max(num / denom);
        }

        // Interaction integrands.
        let y = vec_of(&mut rng, d, 1.0);
        let v = vec_of(&mut rng, b, ubox);
        let y2 = if rng.gen::<bool>() { perturb(&mut rng, &y, 0.0, 1.0) } else { y.clone() };
        let v2 = perturb(&mut rng, &v, 0.0, ubox);
        let denom1 = dist(&x, &x2).powf(alpha) + dist(&y, &y2).powf(alpha) + dist(&u, &u2) + dist(&v, &v2);
        if denom1 > 0.0 {
            let num: f64 = coefs
                .iter()
                .map(|c| {
                    let a1 = pair_vec(c, &x, &y, &u, &v, b);
                    let a2 = pair_vec(c, &x2, &y2, &u2, &v2, b);
                    norm(&a1.iter().zip(&a2).map(|(p, q)| p - q).collect::<Vec<_>>())
                })
                .sum();
            lip_hat = lip_hat.max(num / denom1);
        }

        // Outer nonlinearity in (x, z).
        let zmax = 1.0 + ubox * (b as f64).sqrt() * interaction_scale(&model.drift);
        let z = (2.0 * rng.gen::<f64>() - 1.0) * zmax;
        let z2 = if rng.gen::<bool>() { z + 10f64.powf(-8.0 * rng.gen::<f64>()) } else { z };
        let denom2 = dist(&x, &x2).powf(alpha) + (z - z2).abs();
        if denom2 > 0.0 {
            let num: f64 = coefs
                .iter()
                .map(|c| {
                    let a1: Vec<f64> = (0..b).map(|beta| (c.outer)(&x, 0.0, z, beta)).collect();
                    let a2: Vec<f64> = (0..b).map(|beta| (c.outer)(&x2, 0.0, z2, beta)).collect();
                    norm(&a1.iter().zip(&a2).map(|(p, q)| p - q).collect::<Vec<_>>())
                })
                .sum();
            lip_hat = lip_hat.max(num / denom2);
        }
    }

    for scale in [1.0, 4.0, 16.0] {
        let range = ubox * scale;
        let mut g = 0.0f64;
        for _ in 0..budget {
            let x = vec_of(&mut rng, d, 1.0);
            let u = vec_of(&mut rng, b, range);
            let y = vec_of(&mut rng, d, 1.0);
            let v = vec_of(&mut rng, b, range);
            let c0: f64 = coefs.iter().map(|c| norm(&base_vec(c, &x, &u))).sum();
            g = g.max(c0 / (1.0 + norm(&u)));
            let c1: f64 = coefs.iter().map(|c| norm(&pair_vec(c, &x, &y, &u, &v, b))).sum();
            g = g.max(c1 / (1.0 + norm(&u) + norm(&v)));
            let z = (2.0 * rng.gen::<f64>() - 1.0) * range;
            let co: f64 =
                coefs.iter().map(|c| norm(&(0..b).map(|beta| (c.outer)(&x, 0.0, z, beta)).collect::<Vec<_>>())).sum();
            g = g.max(co / (1.0 + z.abs()));
        }
        growth_by_box.push((range, g));
    }
    let growth_hat = growth_by_box.iter().map(|&(_, g)| g).fold(0.0, f64::max);
    if !lip_hat.is_finite() || !growth_hat.is_finite() {
        return Err(ModelError::NonFinite { component: 0, stage: "regularity quotient" });
    }
    Ok(RegularityReport {
        samples: budget,
        lipschitz_hat: lip_hat,
        growth_hat,
        growth_by_box,
        lipschitz_declared: model.declared.lipschitz,
        growth_declared: model.declared.growth,
        alpha_consistency: lip_hat <= SLACK * model.declared.lipschitz,
        growth_ok: growth_hat <= SLACK * model.declared.growth,
    })
}

fn interaction_scale(c: &Coefficient) -> f64 {
    match &c.interaction {
        Interaction::Convolution { kernels, weight } => weight.abs() * kernels.iter().map(Kernel::sup).sum::<f64>(),
        _ => 1.0,
    }
}

fn pair_vec(c: &Coefficient, x: &[f64], y: &[f64], u: &[f64], v: &[f64], b: usize) -> Vec<f64> {
    match &c.interaction {
        Interaction::None => vec![0.0; b],
        Interaction::Convolution { kernels, weight } => {
            let diff: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            let s: f64 = kernels.iter().zip(v).map(|(k, vg)| k.eval(&diff) * vg).sum();
            vec![weight * s; b]
        }
        Interaction::General(c1) => (0..b).map(|beta| c1(x, y, 0.0, u, v, beta)).collect(),
    }
}

/// Parameters of the reflected Ornstein–Uhlenbeck regime `φ ≡ c`, `K ≡ 0`.
pub fn ou_params(c: f64, sigma: f64, tau: f64) -> GridCellParams {
    GridCellParams {
        dim: 1,
        orientations: 1,
        tau: vec![TimeConstant::Constant { value: tau }],
        sigma,
        firing: FiringRate::Constant { value: c },
        kernels: vec![Kernel::Zero],
        input: ExternalInput::Constant { values: vec![0.0] },
    }
}

/// Four-orientation planar network with shifted Mexican-hat kernels.
pub fn gridcell_params() -> GridCellParams {
    let shift = 0.05;
    let dirs = [[shift, 0.0], [-shift, 0.0], [0.0, shift], [0.0, -shift]];
    GridCellParams {
        dim: 2,
        orientations: 4,
        tau: vec![TimeConstant::Constant { value: 1.0 }],
        sigma: 0.1,
        firing: FiringRate::Softplus,
        kernels: dirs
            .iter()
            .map(|s| Kernel::MexicanHat { a_e: 1.0, s_e: 0.1, a_i: 0.6, s_i: 0.25, shift: s.to_vec() })
            .collect(),
        input: ExternalInput::Constant { values: vec![0.5; 4] },
    }
}

/// Linear mean-field test model `b = −u + ∫ v f`, `σ = 0.3`, on `d = 1`, `B = 1`.
pub fn custom_linear_model() -> ModelSpec {
    let sigma = 0.3;
    ModelSpec {
        name: "custom-linear-test".into(),
        dim: 1,
        orientations: 1,
        alpha: 1.0,
        drift: Coefficient {
            base: Arc::new(|_, _, u, beta| -u[beta]),
            interaction: Interaction::General(Arc::new(|_, _, _, _, v, beta| v[beta])),
            outer: Arc::new(|_, _, z, _| z),
            separable: true,
        },
        diffusion: Coefficient {
            base: Arc::new(move |_, _, _, _| sigma),
            interaction: Interaction::None,
            outer: Arc::new(|_, _, _, _| 0.0),
            separable: true,
        },
        declared: DeclaredConstants { lipschitz: 1.0, growth: 1.0 },
        activity_box: DEFAULT_ACTIVITY_BOX,
        params: None,
    }
}

/// Named model presets.
pub fn preset_model(name: &str) -> Result<ModelSpec, ModelError> {
    match name {
        "gridcell-concrete" => build_concrete_model(&gridcell_params()),
        "ou-test" => {
            let mut m = build_concrete_model(&ou_params(0.3, 0.5, 1.0))?;
            m.name = "ou-test".into();
            Ok(m)
        }
        "custom-linear-test" => Ok(custom_linear_model()),
        other => Err(ModelError::UnknownPreset(other.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_measure(b: usize) -> PointMeasure {
        PointMeasure::uniform(1, b, vec![0.5], vec![0.0; b]).unwrap()
    }

    #[test]
    fn mexican_hat_values() {
        let v = mexican_hat(&[0.0], 1.0, 0.1, 0.5, 0.2).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(mexican_hat(&[0.0], 1.0, 0.0, 0.5, 0.2).is_err());
        assert!(mexican_hat(&[0.0], 1.0, 0.1, 0.5, -1.0).is_err());
    }

    #[test]
    fn softplus_round_trip() {
        for &v in &[1e-6, 0.3, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(v)) - v).abs() < 1e-12 * v.max(1.0));
        }
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-16);
    }

    #[test]
    fn concrete_diffusion_value() {
        let mut p = ou_params(0.3, 0.5, 2.0);
        p.firing = FiringRate::Softplus;
        let m = build_concrete_model(&p).unwrap();
        let s = eval_diffusion(&m, &[0.4], 0.0, &[1.3], &unit_measure(1)).unwrap();
        assert_eq!(s, vec![0.25]);
    }

    #[test]
    fn relu_below_threshold_leaves_leak() {
        let mut p = ou_params(0.0, 0.5, 2.0);
        p.firing = FiringRate::Relu;
        p.input = ExternalInput::Constant { values: vec![-1.0] };
        let m = build_concrete_model(&p).unwrap();
        let b = eval_drift(&m, &[0.4], 0.0, &[0.3], &unit_measure(1)).unwrap();
        assert!((b[0] + 0.3 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_drift_reports_component() {
        let mut m = build_concrete_model(&gridcell_params()).unwrap();
        m.drift.base = Arc::new(|_, _, u, beta| if beta == 2 { f64::NAN } else { -u[beta] });
        let f = PointMeasure::uniform(2, 4, vec![0.5, 0.5], vec![0.1; 4]).unwrap();
        match eval_drift(&m, &[0.3, 0.3], 0.0, &[0.1; 4], &f) {
            Err(ModelError::NonFinite { component, .. }) => assert_eq!(component, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(PointMeasure::new(1, 1, vec![0.1, 0.2], vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
    }

    #[test]
    fn presets_validate() {
        for name in ["gridcell-concrete", "ou-test", "custom-linear-test"] {
            let m = preset_model(name).unwrap();
            let r = estimate_regularity_constants(&m, 400, 3).unwrap();
            assert!(r.alpha_consistency, "{name}: {r:?}");
            assert!(r.growth_ok, "{name}: {r:?}");
        }
        assert!(preset_model("nope").is_err());
    }

    #[test]
    fn quadratic_base_fails_growth() {
        let mut m = custom_linear_model();
        m.drift.base = Arc::new(|_, _, u, beta| u[beta] * u[beta]);
        let r = estimate_regularity_constants(&m, 400, 3).unwrap();
        assert!(!r.growth_ok);
        assert!(r.growth_by_box.windows(2).all(|w| w[1].1 > w[0].1));
    }

    #[test]
    fn square_root_in_x_is_not_lipschitz() {
        let mut m = custom_linear_model();
        m.drift.base = Arc::new(|x, _, u, beta| x[0].abs().sqrt() - u[beta]);
        let r = estimate_regularity_constants(&m, 2000, 5).unwrap();
        assert!(!r.alpha_consistency, "{r:?}");
    }
}

//! Projected Euler scheme for SDEs reflected at the boundary of the orthant.
//!
//! One step computes the unconstrained proposal `p = u + b dt + σ dW` and
//! projects it to `max(p, 0)`. The amount removed by the projection is the
//! increment of the reflection's total variation `|ℓ|`, and `ℓ = −|ℓ|`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SdeError {
    #[error("non-finite value in step (component {component}): u={u}, drift={drift}, diffusion={diffusion}, dW={dw}")]
    NonFinite { component: usize, u: f64, drift: f64, diffusion: f64, dw: f64 },
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("expected {expected} increments, got {got}")]
    IncrementCount { expected: usize, got: usize },
}

/// Outcome of one reflected step on a scalar component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub u: f64,
    /// Amount the projection removed; positive only when `u == 0`.
    pub push: f64,
}

/// One projected Euler step of a single component.
#[inline]
pub fn reflected_euler_step(u: f64, drift: f64, diffusion: f64, dw: f64, dt: f64) -> StepOutcome {
    let p = u + drift * dt + diffusion * dw;
    if p >= 0.0 {
        StepOutcome { u: p, push: 0.0 }
    } else {
        StepOutcome { u: 0.0, push: -p }
    }
}

/// Checked variant used where inputs come from user callables.
pub fn reflected_euler_step_checked(
    component: usize,
    u: f64,
    drift: f64,
    diffusion: f64,
    dw: f64,
    dt: f64,
) -> Result<StepOutcome, SdeError> {
    let out = reflected_euler_step(u, drift, diffusion, dw, dt);
    if !out.u.is_finite() || !drift.is_finite() || !diffusion.is_finite() || !dw.is_finite() {
        return Err(SdeError::NonFinite { component, u, drift, diffusion, dw });
    }
    Ok(out)
}

/// State of one reflected particle with `B` components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectedState {
    pub u: Vec<f64>,
    /// Reflection term, `ℓ = −|ℓ|` componentwise.
    pub ell: Vec<f64>,
    /// Total variation `|ℓ|`.
    pub ell_tv: Vec<f64>,
    pub t: f64,
}

impl ReflectedState {
    pub fn new(u: Vec<f64>, t: f64) -> Self {
        let b = u.len();
        Self { u, ell: vec![0.0; b], ell_tv: vec![0.0; b], t }
    }

    /// Advances all components in place.
    pub fn step(&mut self, drift: &[f64], diffusion: &[f64], dw: &[f64], dt: f64) -> Result<(), SdeError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SdeError::BadTimeStep(dt));
        }
        for beta in 0..self.u.len() {
            let out = reflected_euler_step_checked(beta, self.u[beta], drift[beta], diffusion[beta], dw[beta], dt)?;
            self.u[beta] = out.u;
            self.ell_tv[beta] += out.push;
            self.ell[beta] = -self.ell_tv[beta];
        }
        self.t += dt;
        Ok(())
    }

    /// Exact invariants: `u ≥ 0`, `ℓ = −|ℓ|`, `|ℓ| ≥ 0`.
    pub fn invariants_hold(&self) -> bool {
        self.u.iter().all(|&v| v >= 0.0) && self.ell.iter().zip(&self.ell_tv).all(|(&l, &tv)| l == -tv && tv >= 0.0)
    }
}

/// Recorded path of a single reflected particle.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ReflectedState>,
    /// `max_t |u(t)|` over every step, not only recorded ones.
    pub running_max: f64,
    /// Per-step `(push > 0, u == 0)` flags, one entry per step and component.
    pub active: Vec<(bool, bool)>,
}

/// Integrates a path with caller-supplied increments.
///
/// `increments` holds one `B`-vector per step. States are recorded every
/// `record_every` steps (and at the final step).
pub fn integrate_path(
    initial: ReflectedState,
    drift: impl Fn(f64, &[f64], &mut [f64]),
    diffusion: impl Fn(f64, &[f64], &mut [f64]),
    increments: &[Vec<f64>],
    dt: f64,
    record_every: usize,
) -> Result<Trajectory, SdeError> {
    let b = initial.u.len();
    let mut state = initial;
    let norm = |u: &[f64]| u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut running_max = norm(&state.u);
    let mut times = vec![state.t];
    let mut states = vec![state.clone()];
    let mut active = Vec::with_capacity(increments.len() * b);
    let mut db = vec![0.0; b];
    let mut ds = vec![0.0; b];
    let every = record_every.max(1);
    for (n, dw) in increments.iter().enumerate() {
        if dw.len() != b {
            return Err(SdeError::IncrementCount { expected: b, got: dw.len() });
        }
        drift(state.t, &state.u, &mut db);
        diffusion(state.t, &state.u, &mut ds);
        let before = state.ell_tv.clone();
        state.step(&db, &ds, dw, dt)?;
        for beta in 0..b {
            active.push((state.ell_tv[beta] > before[beta], state.u[beta] == 0.0));
        }
        running_max = running_max.max(norm(&state.u));
        if (n + 1) % every == 0 || n + 1 == increments.len() {
            times.push(state.t);
            states.push(state.clone());
        }
    }
    Ok(Trajectory { times, states, running_max, active })
}

/// Default step for horizon `t`.
pub fn default_dt(horizon: f64) -> f64 {
    horizon / 4096.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_step() {
        let s = reflected_euler_step(0.2, -1.0, 0.0, 0.0, 0.1);
        assert!((s.u - 0.1).abs() < 1e-15);
        assert_eq!(s.push, 0.0);
    }

    #[test]
    fn projected_step_records_push() {
        let s = reflected_euler_step(0.05, -1.0, 0.0, 0.0, 0.1);
        assert_eq!(s.u, 0.0);
        assert!((s.push - 0.05).abs() < 1e-15);
    }

    #[test]
    fn boundary_start_with_positive_drift() {
        let s = reflected_euler_step(0.0, 2.0, 0.0, 0.0, 0.1);
        assert!((s.u - 0.2).abs() < 1e-15);
        assert_eq!(s.push, 0.0);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(reflected_euler_step_checked(0, 0.1, f64::NAN, 0.0, 0.0, 0.1).is_err());
        assert!(reflected_euler_step_checked(0, 0.1, 0.0, f64::INFINITY, 1.0, 0.1).is_err());
    }

    #[test]
    fn relaxation_matches_exponential() {
        let dt = 1e-4;
        let n = 10_000;
        let inc = vec![vec![0.0]; n];
        let tr = integrate_path(
            ReflectedState::new(vec![1.0], 0.0),
            |_, u, out| out[0] = -u[0],
            |_, _, out| out[0] = 0.0,
            &inc,
            dt,
            n,
        )
        .unwrap();
        let last = tr.states.last().unwrap();
        assert!((last.u[0] - (-1.0f64).exp()).abs() < 1e-3);
        assert_eq!(tr.running_max, 1.0);
    }

    #[test]
    fn pinned_path_accumulates_push() {
        let dt = 1e-3;
        let n = 1000;
        let inc = vec![vec![0.0]; n];
        let tr = integrate_path(
            ReflectedState::new(vec![0.0], 0.0),
            |_, _, out| out[0] = -0.7,
            |_, _, out| out[0] = 0.0,
            &inc,
            dt,
            100,
        )
        .unwrap();
        let last = tr.states.last().unwrap();
        assert_eq!(last.u[0], 0.0);
        assert!((last.ell_tv[0] - 0.7 * dt * n as f64).abs() < 1e-12);
        assert_eq!(last.ell[0], -last.ell_tv[0]);
    }
}

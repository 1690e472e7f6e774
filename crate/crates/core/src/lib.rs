//! Numerical lab for reflected interacting-particle networks and their
//! mean-field limits.

pub mod io;
pub mod lab;
pub mod meanfield;
pub mod model;
pub mod noise;
pub mod particles;
pub mod rng;
pub mod sde;
pub mod transport;

pub use lab::{ConvergenceReport, ExperimentPlan, SlopeFit};
pub use model::{GridCellParams, MeasureView, ModelSpec, PointMeasure};
pub use noise::{CorrelatedNoiseField, MollifierProfile};
pub use particles::{InitialDataSpec, SpatialGrid};
pub use sde::ReflectedState;
pub use transport::{DiscreteMeasure, GroundMetric};

/// Master seed used when none is given.
pub const DEFAULT_SEED: u64 = 2026;

//! Inelastic Lorentz gas: microscopic event-driven simulation, the linear
//! inelastic Boltzmann series, and the estimators that compare the two.

pub mod collision;
pub mod error;
pub mod estimators;
pub mod field;
pub mod flow;
pub mod geometry;
pub mod harness;
pub mod kinetic;
pub mod lemmas;
pub mod rng;

pub use collision::Restitution;
pub use error::{Error, Result};
pub use estimators::{ConvergenceRow, EstimateWithCI};
pub use field::{Ball, KineticParams, ScattererField};
pub use flow::{CollisionEvent, Flags, Guards, Trajectory};
pub use geometry::{SphereQuadrature, Vector};
pub use kinetic::{
    CollisionSequence, InitialDatum, Kernel, SeriesConfig, SeriesValue, TestFunction,
};

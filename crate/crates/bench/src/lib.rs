//! Shared fixtures for the benchmarks.

use lorentz_core::field::{dynamical_ball, sample_field};
use lorentz_core::geometry::vector;
use lorentz_core::kinetic::Bump;
use lorentz_core::{KineticParams, Restitution, ScattererField, Vector};

pub fn half() -> Restitution {
    Restitution::new(0.5).unwrap()
}

pub fn origin() -> Vector<2> {
    vector(&[0.0, 0.0])
}

pub fn e1() -> Vector<2> {
    vector(&[1.0, 0.0])
}

/// Boltzmann-Grad field around the unit-time path from the origin along `e1`.
pub fn field(eps: f64, seed: u64) -> ScattererField<2> {
    let p = KineticParams::bg_locked(2, half(), eps).unwrap();
    sample_field(dynamical_ball(&origin(), &e1(), 1.0, eps), p, seed).unwrap()
}

pub fn bump() -> Bump<2> {
    Bump {
        x_center: vector(&[0.5, 0.0]),
        x_radius: 1.5,
        v_center: origin(),
        v_radius: 1.5,
    }
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("zero velocity")]
    ZeroVelocity,
    #[error("started inside scatterer")]
    StartedInside,
    #[error("point not on sphere")]
    PointNotOnSphere,
    #[error("normal is not a unit vector (|omega| = {0})")]
    NonUnitNormal(f64),
    #[error("restitution must be in (0,1], got {0}")]
    Restitution(f64),
    #[error("unsupported dimension {0}")]
    Dimension(usize),
    #[error("quadrature order must be at least 4, got {0}")]
    QuadratureOrder(usize),
    #[error("field too dense: expected {0} scatterers")]
    FieldTooDense(f64),
    #[error("energy must be non-negative, got {0}")]
    NegativeEnergy(f64),
    #[error("outside the domain u2 + cos^2(theta) <= 1")]
    AppendixDomain,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("no admissible rescaling found within {limit} attempts (quotient {quotient}, bound {bound})")]
    RejectionLimit { limit: usize, quotient: f64, bound: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("delta {delta} outside (0, {max}]")]
    DeltaOutOfRange { delta: f64, max: f64 },
    #[error("monomial degree {degree} exceeds cap {cap}")]
    DegreeExceedsCap { degree: usize, cap: usize },
    #[error("parameter bound must be at least 1, got {0}")]
    BoundTooSmall(f64),
    #[error("construction infeasible: {0}")]
    Infeasible(String),
    #[error("readout clamp {arch} does not match the data bound {data}")]
    ClampMismatch { arch: f64, data: f64 },
    #[error("training diverged at epoch {epoch}: loss {loss} against initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

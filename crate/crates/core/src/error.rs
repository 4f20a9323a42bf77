use thiserror::Error;

use crate::meanfield::PicardReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state dimension {required} exceeds the configured capacity {max}")]
    Capacity { required: u128, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("expectation undefined for the zero vector")]
    UndefinedExpectation,

    #[error("non-finite state{}", match .step { Some(s) => format!(" at step {s}"), None => String::new() })]
    BlowUp { step: Option<usize> },

    #[error("degenerate jump in channel {channel}: tr(L γ L*) = {weight:e}")]
    DegenerateJump { channel: usize, weight: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("intensity {intensity} exceeds thinning cap {cap} at t = {time}")]
    IntensityCap { time: f64, intensity: f64, cap: f64 },

    #[error("value out of representable range: {0}")]
    Range(String),

    #[error("mean-field curve did not converge after {} Picard iterations", .0.total_iterations())]
    EtaNotConverged(Box<PicardReport>),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach a step index to a blow-up raised inside a single stepper.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::BlowUp { step: None } => Error::BlowUp { step: Some(step) },
            other => other,
        }
    }
}

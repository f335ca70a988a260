use thiserror::Error;

use crate::trajectory::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no nominal trajectory")]
    NoNominalTrajectory,

    #[error("planner infeasible: {reason}")]
    PlannerInfeasible {
        reason: String,
        /// Best iterate reached by the solver, kept for diagnosis.
        best: Box<Trajectory>,
    },

    #[error("controller failure at step {step}: {reason}")]
    ControllerInfeasible { step: usize, reason: String },

    #[error("simulation aborted after {steps} steps: {reason}")]
    SimulationAborted { steps: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable error class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) | Error::Config(_) | Error::Parse(_) => "config",
            Error::Dimension(_) => "internal",
            Error::NoNominalTrajectory => "input",
            Error::PlannerInfeasible { .. } => "planner",
            Error::ControllerInfeasible { .. } => "controller",
            Error::SimulationAborted { .. } => "simulation",
            Error::Io(_) => "io",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Parse(format!("{other:?}")),
            }
        } else {
            Error::Parse(e.to_string())
        }
    }
}

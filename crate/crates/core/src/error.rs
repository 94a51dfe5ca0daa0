use thiserror::Error;

/// Errors raised by the laboratory's constructors and solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("size budget exceeded: {what} requires {count} but the budget is {budget}")]
    Size {
        what: String,
        count: String,
        budget: usize,
    },
    #[error("invalid configuration for `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("level error: {0}")]
    Level(String),
    #[error("grid error: time {time} is not on the time grid (dt = {dt})")]
    OffGrid { time: f64, dt: f64 },
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("property violated: {property}; worst value {worst:e} at {location}")]
    Property {
        property: String,
        worst: f64,
        location: String,
    },
    #[error("obstacle error: {0}")]
    Obstacle(String),
    #[error("monotonicity (CFL) condition violated: dt = {dt:e} exceeds the bound {bound:e}")]
    Cfl { dt: f64, bound: f64 },
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("{0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

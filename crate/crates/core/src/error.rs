use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    /// A log-weight update left the representable range.
    #[error(
        "numerical blowup at t = {t:.4} (control norm {control_norm:.3e}){}{}",
        measure.map(|m| format!(", measure {m}")).unwrap_or_default(),
        trajectory.map(|j| format!(", trajectory {j}")).unwrap_or_default()
    )]
    NumericalBlowup {
        t: f64,
        control_norm: f64,
        measure: Option<usize>,
        trajectory: Option<u64>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Attach a measure index to a blowup raised by a single-measure step.
    pub fn with_measure(self, index: usize) -> Self {
        match self {
            Error::NumericalBlowup {
                t,
                control_norm,
                trajectory,
                ..
            } => Error::NumericalBlowup {
                t,
                control_norm,
                measure: Some(index),
                trajectory,
            },
            other => other,
        }
    }

    pub fn with_trajectory(self, index: u64) -> Self {
        match self {
            Error::NumericalBlowup {
                t,
                control_norm,
                measure,
                ..
            } => Error::NumericalBlowup {
                t,
                control_norm,
                measure,
                trajectory: Some(index),
            },
            other => other,
        }
    }
}

use thiserror::Error;

/// Errors produced anywhere in the training and posterior pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training aborted at step {step}: non-finite {component}")]
    TrainingDiverged { step: usize, component: &'static str },

    #[error("{what} needs {requested} entries, above the cap of {cap}")]
    CapExceeded {
        what: &'static str,
        requested: usize,
        cap: usize,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for the errors a CLI should report as configuration problems.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_config(),
            _ => matches!(
                self,
                Error::Config(_) | Error::InvalidHyperparameter(_) | Error::Domain(_) | Error::Format(_) | Error::Shape(_)
            ),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_numerical(),
            _ => matches!(self, Error::Numerical(_) | Error::TrainingDiverged { .. } | Error::CapExceeded { .. }),
        }
    }

    /// Tags the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

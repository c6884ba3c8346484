use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    Dimension { op: &'static str, expected: (usize, usize), got: (usize, usize) },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("class {class} has {available} points, needs {required}")]
    Split { class: usize, available: usize, required: usize },

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    Range { what: &'static str, value: usize, lo: usize, hi: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Training { step: usize, loss: f64 },

    #[error("projector: {0}")]
    Projector(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("numerical failure: {0}")]
    Numerical(&'static str),

    #[error("guidance failed at step t={step}: {source}")]
    Guidance { step: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

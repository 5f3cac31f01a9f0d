use std::sync::Arc;
use thiserror::Error;

/// Errors raised by data handling, estimation and the simulation engine.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid subject {id}: {reason}")]
    InvalidSubject { id: u64, reason: String },

    #[error("subject {id}: event time {time} lies beyond follow-up {tau}")]
    EventBeyondFollowUp { id: u64, time: f64, tau: f64 },

    #[error("subject {id}: no weight available for week {week}")]
    MissingWeight { id: u64, week: usize },

    #[error("time-varying series for subject {id}: {reason}")]
    InvalidSeries { id: u64, reason: String },

    #[error("time-varying series has no week-0 measurement to carry forward")]
    MissingBaselineMeasurement,

    #[error("positivity violation: subject {id} has unswitched probability {prob:e} at week {week}")]
    Positivity { id: u64, week: usize, prob: f64 },

    #[error("no events in the data")]
    NoEvents,

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("zero risk-set denominator at time {time}")]
    EmptyRiskSet { time: f64 },

    #[error("singular information matrix")]
    SingularInformation,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite objective value")]
    NonFinite,

    #[error("{mode} summaries need counterfactual data, which ingested datasets do not carry")]
    MissingCounterfactual { mode: &'static str },

    #[error("missing variance: {0}")]
    MissingVariance(&'static str),

    #[error("bootstrap failed: {failed} of {total} replicates did not converge")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Csv(Arc<csv::Error>),

    #[error(transparent)]
    Io(Arc<std::io::Error>),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(Arc::new(e))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(Arc::new(e))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

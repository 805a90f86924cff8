use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {what} ({diagnostics})")]
    NumericFailure { what: String, diagnostics: String },

    #[error("privacy budget exhausted: query stage alone costs epsilon {epsilon_w:.6}, target is {target:.6}")]
    BudgetExhausted { epsilon_w: f64, target: f64 },

    #[error("no noise multiplier in [{lo}, {hi}] meets epsilon target {target}")]
    CalibrationFailed { lo: f64, hi: f64, target: f64 },

    #[error("accounting bug: ledger epsilon {epsilon:.6} exceeds target {target:.6} after calibration")]
    AccountingBug { epsilon: f64, target: f64 },

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("degenerate training data: {0}")]
    DegenerateTraining(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse { offset, msg: msg.into() }
    }

    /// True for errors caused by bad user input rather than internal faults.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NumericFailure { .. } | Error::AccountingBug { .. })
    }
}

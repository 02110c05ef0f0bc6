use thiserror::Error;
use wickbench_core::Error as CoreError;

pub const EXIT_IDENTITY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

#[derive(Debug, Clone, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("budget failure: {0}")]
    Budget(String),
    #[error("identity check failed: {0}")]
    Identity(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Budget(_) | CliError::Io(_) => EXIT_BUDGET,
            CliError::Identity(_) => EXIT_IDENTITY,
        }
    }
}

/// Parameter and model errors are config errors; numerical limits are budget errors.
pub fn classify(e: CoreError) -> CliError {
    match e {
        CoreError::SiteOutOfRange { .. }
        | CoreError::KernelNotHermitian { .. }
        | CoreError::RangeViolation { .. }
        | CoreError::OddOperatorUnsupported { .. }
        | CoreError::PositiveTimeUnsupported { .. }
        | CoreError::ObservableNotQuadratic { .. }
        | CoreError::InvalidParameter(_) => CliError::Config(e.to_string()),
        CoreError::ModeCountExceeded { .. }
        | CoreError::EigenFailure(_)
        | CoreError::OverflowRisk { .. }
        | CoreError::CumulantOrderExceeded { .. }
        | CoreError::SeriesDivergenceSuspected { .. }
        | CoreError::UnitarityLost { .. }
        | CoreError::QuadratureBudgetExceeded { .. }
        | CoreError::BudgetUnattainable { .. }
        | CoreError::DegenerateFit(_) => CliError::Budget(e.to_string()),
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        classify(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

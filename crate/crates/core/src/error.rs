use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state became non-finite at t = {time} s")]
    NonFiniteState { time: f64 },

    #[error("feedback constraint is violated but its normal vector vanishes (|a| = {norm:e})")]
    DegenerateConstraint { norm: f64 },

    #[error(
        "no rate in [{lambda_min}, {lambda_max}] admits a feasible constant metric on the grid"
    )]
    Infeasible { lambda_min: f64, lambda_max: f64 },

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("miscoverage level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("insufficient calibration data: {0}")]
    InsufficientCalibrationData(String),

    #[error("plan is infeasible: {0}")]
    InfeasiblePlan(String),

    #[error("complementary block of the metric is singular (min eigenvalue {min_eig:e})")]
    SingularBlock { min_eig: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("stage {stage} not constructed (built through {built})")]
    StageNotBuilt { stage: usize, built: usize },

    #[error("translate shift {shift} out of range at stage {stage} (height {height})")]
    ShiftOutOfRange {
        stage: usize,
        shift: i128,
        height: u64,
    },

    #[error("time {time} is not an integer multiple of the step at any usable stage up to {max_stage}")]
    InadmissibleTime { time: String, max_stage: usize },

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("spacer mass exceeds declared budget at stage {stage}: remaining {remaining}, requested {requested}")]
    SpacerBudgetExceeded {
        stage: usize,
        remaining: String,
        requested: String,
    },

    #[error("tower size exceeds representable range at stage {0}")]
    TowerTooLarge(usize),

    #[error("level set would exceed the materialization cap ({cap} levels)")]
    SetTooLarge { cap: u64 },

    #[error("column offset {0} out of range at stage {1}")]
    OffsetOutOfRange(String, usize),

    #[error("column at offset {0} has zero mass")]
    ZeroMassColumn(String),

    #[error("coloring is not refinement-consistent: level {level} at stage {stage} has children of a different color")]
    ColoringInconsistent { stage: usize, level: u64 },

    #[error("set {0:?} is not measurable for the coloring factor")]
    NotFactorMeasurable(String),

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("compute budget exceeded: {used} of {limit} column scans")]
    BudgetExceeded { used: u64, limit: u64 },

    #[error("no admissible re-basing stage for stage {stage} within horizon {horizon}")]
    NoAdmissibleStage { stage: usize, horizon: usize },

    #[error("displacement growth condition unattainable: {0}")]
    GrowthUnattainable(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for violated preconditions and
    /// failed certifications, 3 for budget exhaustion, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::HypothesisViolated(_) => 2,
            Error::BudgetExceeded { .. } => 3,
            _ => 1,
        }
    }
}

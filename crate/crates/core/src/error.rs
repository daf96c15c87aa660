use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("no path from node {origin} to node {dest}")]
    NoPath { origin: usize, dest: usize },

    #[error("infeasible plan: no idle bike at stand {stand} for trip {trip} at minute {minute}")]
    InfeasiblePlan {
        trip: String,
        stand: usize,
        minute: u32,
    },

    #[error("infeasible configuration: {0}")]
    ConfigInfeasible(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sensing score undefined: {0}")]
    UndefinedScore(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn malformed(msg: impl Into<String>) -> Self {
        Error::MalformedInput(msg.into())
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 for bad input, 3 for infeasible configurations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::MalformedInput(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::InfeasiblePlan { .. } | Error::ConfigInfeasible(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

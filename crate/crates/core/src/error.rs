use thiserror::Error;

/// Errors produced anywhere in the screening workflow.
#[derive(Debug, Error)]
pub enum ScreenError {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergedTraining { epoch: usize },

    #[error("need at least {required} pretraining samples, got {got}")]
    InsufficientPretraining { required: usize, got: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("all score values are zero; centering step is undefined")]
    DegenerateScore,

    #[error("x = {x} lies outside the interior set [{lo}, {hi}]")]
    BoundaryViolation { x: f64, lo: f64, hi: f64 },

    #[error("fold {fold} holds {size} samples, fewer than the {min} required to train")]
    FoldTooSmall { fold: usize, size: usize, min: usize },

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ScreenError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ScreenError {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        ScreenError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Name of the innermost labelled stage, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            ScreenError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ScreenError>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}

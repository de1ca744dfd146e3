use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlmmError>;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmmError {
    #[error("invalid panel layout: {0}")]
    InvalidLayout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate mean at observation {index}: mu = {mu}")]
    DegenerateMean { index: usize, mu: f64 },

    #[error("AR(1) parameter outside the stationary region: rho = {0}")]
    Stationarity(f64),

    #[error("degenerate second moment: {0}")]
    DegenerateMoment(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("numerical failure{}: {context}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NumericalFailure {
        context: String,
        iteration: Option<usize>,
    },

    #[error("degenerate GCV: every grid point has tr(S) >= n")]
    DegenerateGcv,

    #[error("cannot standardise covariate column {column}: zero variance")]
    Standardisation { column: usize },

    #[error("degenerate component: {0}")]
    DegenerateComponent(String),

    #[error("component ascent did not converge: {0}")]
    ComponentFailure(String),

    #[error("scenario rejected: {0}")]
    ScenarioRejected(String),

    #[error("{0}")]
    Io(String),
}

impl GlmmError {
    pub(crate) fn numerical(context: impl Into<String>) -> Self {
        GlmmError::NumericalFailure {
            context: context.into(),
            iteration: None,
        }
    }

    /// Attaches an outer-iteration index to a numerical failure.
    pub(crate) fn at_iteration(self, iter: usize) -> Self {
        match self {
            GlmmError::NumericalFailure { context, .. } => GlmmError::NumericalFailure {
                context,
                iteration: Some(iter),
            },
            other => other,
        }
    }

    /// True for failures that stem from floating-point breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GlmmError::NumericalFailure { .. }
                | GlmmError::SingularSystem(_)
                | GlmmError::DegenerateGcv
                | GlmmError::DegenerateMean { .. }
                | GlmmError::DegenerateMoment(_)
                | GlmmError::DegenerateComponent(_)
                | GlmmError::ComponentFailure(_)
        )
    }
}

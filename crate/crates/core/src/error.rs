use thiserror::Error;

/// Everything that can go wrong inside the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("requested storage of {requested} values overflows the addressable size")]
    StorageOverflow { requested: String },

    #[error("non-finite value in {stage} at path {path}, step {step}")]
    NonFinite {
        stage: &'static str,
        path: usize,
        step: usize,
    },

    #[error("non-finite function value at atom {atom} of the empirical law")]
    NonFiniteAtom { atom: usize },

    #[error(
        "singular regression system at step {step} (degree {degree}, {terms} basis terms); \
         reduce the regression degree"
    )]
    SingularRegression {
        step: usize,
        degree: usize,
        terms: usize,
    },

    #[error("Picard iteration did not reach tol {tol:e} within {max_iter} iterations (last gap {last_gap:e})")]
    PicardNotConverged {
        tol: f64,
        max_iter: usize,
        last_gap: f64,
        history: Vec<f64>,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("frozen law has no atoms for time index {0}")]
    MissingLawIndex(usize),

    #[error("CFL condition violated: dt = {dt:e} exceeds the stable bound {bound:e}")]
    Cfl { dt: f64, bound: f64 },

    #[error("point {x} lies outside the interpolation domain [{lo}, {hi}]")]
    OutsideDomain { x: f64, lo: f64, hi: f64 },

    #[error("hypothesis check failed: {0}")]
    Hypothesis(String),

    #[error("configuration error at line {line}, column {column}: {message}")]
    Config {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// The error under any stage context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Input problems: bad scenario files, arguments, grids or I/O.
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::InvalidGrid(_)
                | Error::InvalidArgument(_)
                | Error::Config { .. }
                | Error::Scenario(_)
                | Error::Io(_)
        )
    }

    /// True for failures caused by numerics rather than by the input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::NonFinite { .. }
                | Error::NonFiniteAtom { .. }
                | Error::SingularRegression { .. }
                | Error::PicardNotConverged { .. }
                | Error::Cfl { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

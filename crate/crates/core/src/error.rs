use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid model descriptor: {0}")]
    Descriptor(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "missing value in column {column} of block '{block}', which does not have FIML enabled"
    )]
    MissingNotAllowed { block: String, column: usize },

    #[error("class {class} has zero effective weight{}", block_suffix(.block))]
    DegenerateClass { class: usize, block: Option<String> },

    #[error("unit {unit} has zero probability under every class")]
    LikelihoodUnderflow { unit: usize },

    #[error("covariate solver diverged (non-finite objective at iteration {iteration}); try a smaller step size")]
    SolverDivergence { iteration: usize },

    #[error("BCH correction infeasible: confusion matrix condition number {condition:.3e} exceeds 1e12; use the ML correction instead")]
    CorrectionInfeasible { condition: f64 },

    #[error("every initialization failed: {}", .0.join("; "))]
    AllInitsFailed(Vec<String>),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("model schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("unsupported model schema version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("bootstrap failed: {failed} of {total} repetitions failed")]
    BootstrapFailed { failed: usize, total: usize },
}

fn block_suffix(block: &Option<String>) -> String {
    match block {
        Some(name) => format!(" in block '{name}'"),
        None => String::new(),
    }
}

impl Error {
    /// True for failures of the numerical procedure itself rather than of its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateClass { .. }
                | Error::LikelihoodUnderflow { .. }
                | Error::SolverDivergence { .. }
                | Error::CorrectionInfeasible { .. }
                | Error::AllInitsFailed(_)
                | Error::BootstrapFailed { .. }
        )
    }
}

//! Error taxonomy shared by every module in the crate.
//!
//! The variants map onto failure classes the CLI translates into process
//! exit codes: config problems, trace validation problems, empty
//! comparisons, and numerical failures each keep a distinct identity.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller handed in data that violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A config file failed schema or semantic validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A mask whose total mass is at or below the epsilon floor.
    #[error("empty mask: total mass {mass:.3e} is at or below eps")]
    EmptyMask { mass: f64 },

    /// An operation that needs the first-call anchor ran without one.
    #[error("anchor record missing for object {object}")]
    AnchorMissing { object: usize },

    /// The decoder backing a pipeline or a causal probe failed.
    #[error("decoder failure: {0}")]
    Decoder(String),

    /// A ground-truth object has no support inside the image at a slice.
    #[error("object {object} absent from slice {slice}")]
    ObjectAbsent { object: usize, slice: usize },

    /// A loop map could not be evaluated at a finite-difference point.
    #[error("jacobian evaluation failed while perturbing coordinate {coordinate}: {source}")]
    JacobianEval {
        coordinate: usize,
        #[source]
        source: Box<Error>,
    },

    /// An eigenvalue (or similar) iteration hit its cap without converging.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A statistical routine received too little data to say anything.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A correlation was requested for a degenerate (constant) input.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// gap_closed with coinciding baseline means.
    #[error("gap undefined: baseline means coincide at {value}")]
    UndefinedGap { value: f64 },

    /// A trace directory failed structural validation.
    #[error("trace validation failed: {0}")]
    TraceValidation(String),

    /// A comparison was requested but no pairs survived matching.
    #[error("empty comparison: no overlapping pairs")]
    EmptyComparison,

    /// Filesystem trouble, annotated with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

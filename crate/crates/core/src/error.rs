use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected shape) disagree.
    #[error("shape mismatch in `{op}` at node {node}: {details}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        details: String,
    },

    /// An op produced a NaN or infinity during the forward pass.
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },

    /// Backward was started from a node that is not a 1x1 scalar.
    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    /// A finite-difference probe of the loss came back non-finite.
    #[error("gradient check: non-finite loss while perturbing parameter entry {param_index}")]
    NonFiniteProbe { param_index: usize },

    /// Network shape description violates its own invariants.
    #[error("invalid network spec: {0}")]
    InvalidNetworkSpec(String),

    /// A loss was requested over an empty batch.
    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    /// An operation needs units from both treatment groups.
    #[error("{context}: batch contains only treatment group t={group}")]
    SingleTreatmentGroup { context: &'static str, group: u8 },

    /// Vector lengths disagree.
    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// Configuration value out of range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    /// A covariance matrix is not symmetric positive definite.
    #[error("covariance for factor {factor} is not symmetric positive definite")]
    NotPositiveDefinite { factor: &'static str },

    /// CSV cell failed to parse; row is 1-based over data rows, column is the header name.
    #[error("csv parse error at row {row}, column `{column}`: {details}")]
    CsvCell {
        row: usize,
        column: String,
        details: String,
    },

    /// A declared column is missing from the CSV header.
    #[error("csv column `{0}` not found in header")]
    MissingColumn(String),

    /// Treatment column holds something other than 0/1.
    #[error("non-binary treatment value {value} at row {row}")]
    NonBinaryTreatment { row: usize, value: f64 },

    /// Split fractions must sum to one.
    #[error("split fractions sum to {0}, expected 1")]
    BadFractions(f64),

    /// A stratified split left some part without one of the treatment groups.
    #[error("stratified split part {part} has no units with t={group}")]
    EmptySplitGroup { part: usize, group: u8 },

    /// Feature roles are required but at least one column is unlabeled.
    #[error("identification requires known feature roles; column {0} is unknown")]
    UnknownRole(usize),

    /// Model and dataset covariate schemas disagree.
    #[error("checkpoint/dataset schema mismatch: {0}")]
    SchemaMismatch(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// CSV reader failure (framing, not cell contents).
    #[error(transparent)]
    Csv(#[from] csv::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use crate::logit::EliminationTrace;
use crate::pipeline::{FeatureDiagnostic, PartialReport};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv: {0}")]
    Csv(String),

    #[error("missing column \"{0}\"")]
    MissingColumn(String),

    #[error("duplicate column \"{0}\"")]
    DuplicateColumn(String),

    #[error("non-numeric cell \"{value}\" at row {row}, column \"{column}\"")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-finite value at row {row}, column \"{column}\"")]
    NonFinite { row: usize, column: String },

    #[error("label outside {{0,1}} at row {row}: \"{value}\"")]
    LabelOutOfRange { row: usize, value: String },

    #[error("both classes must be present, found only class {0}")]
    SingleClass(u8),

    #[error("degenerate split: {n_train} training rows and {n_test} test rows")]
    DegenerateSplit { n_train: usize, n_test: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected} features, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("constant input, statistic undefined")]
    ConstantVector,

    #[error("constant column \"{0}\"")]
    ConstantColumn(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("logistic fit did not converge after {iterations} iterations (possible perfect separation)")]
    NonConvergence { iterations: usize },

    #[error("information matrix is singular (collinear columns)")]
    Singular,

    #[error("all features eliminated at alpha={alpha}")]
    AllEliminated { alpha: f64, trace: EliminationTrace },

    #[error("no row is out-of-bag for any tree")]
    NoOobRows,

    #[error("k={k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("cross-validation fold {fold} holds a single class")]
    SingleClassFold { fold: usize },

    #[error("no features survived stage 1")]
    NoStage1Survivors { diagnostics: Vec<FeatureDiagnostic> },

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
        partial: Box<PartialReport>,
    },

    #[error("missing {0} artifact")]
    MissingArtifact(&'static str),

    #[error("schema version mismatch in {artifact}: expected {expected}, found {found}")]
    SchemaVersion {
        artifact: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("artifact {artifact} is inconsistent: {reason}")]
    ArtifactMismatch {
        artifact: &'static str,
        reason: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::MissingColumn(_) => "missing_column",
            Error::DuplicateColumn(_) => "duplicate_column",
            Error::NonNumeric { .. } => "non_numeric",
            Error::NonFinite { .. } => "non_finite",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::SingleClass(_) => "single_class",
            Error::DegenerateSplit { .. } => "degenerate_split",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ConstantVector => "constant_vector",
            Error::ConstantColumn(_) => "constant_column",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Singular => "singular",
            Error::AllEliminated { .. } => "all_eliminated",
            Error::NoOobRows => "no_oob_rows",
            Error::KOutOfRange { .. } => "k_out_of_range",
            Error::SingleClassFold { .. } => "single_class_fold",
            Error::NoStage1Survivors { .. } => "no_stage1_survivors",
            Error::Stage { source, .. } => source.kind(),
            Error::MissingArtifact(_) => "missing_artifact",
            Error::SchemaVersion { .. } => "schema_version",
            Error::ArtifactMismatch { .. } => "artifact_mismatch",
            Error::Json(_) => "json",
        }
    }
}

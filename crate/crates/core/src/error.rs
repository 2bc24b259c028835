//! Crate-wide error type. Every failure carries a stable machine-parsable
//! class name (see [`Error::class`]) so the CLI can emit single-line
//! diagnostics like `error[EmptySeeds]: ...`.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The volume has a single intensity value; normalization and
    /// equalization are undefined for it.
    #[error("volume is constant (min == max == {value}); cannot rescale")]
    ConstantVolume { value: f32 },

    #[error("geometry mismatch: expected dims {expected:?}, got {got:?}")]
    GeometryMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("seed template produced no seed voxels (no supra-threshold voxels inside the template region)")]
    EmptySeeds,

    /// Reserved internal assertion: the template fallback always yields 24
    /// boundary points, so a degenerate slice indicates a bug.
    #[error("slice {z} has fewer than 3 usable boundary points")]
    DegenerateSlice { z: usize },

    #[error("tensor shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid network config: {0}")]
    ConfigInvalid(String),

    #[error("case {case_id} is declared positive but has an empty annotation")]
    EmptyAnnotation { case_id: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergenceDetected { epoch: usize },

    #[error("cannot split {n_cases} cases into {k} folds")]
    TooFewCases { n_cases: usize, k: usize },

    #[error("no positive ground truth; sensitivity is undefined")]
    NoPositives,

    #[error("invalid phantom spec: {0}")]
    SpecInvalid(String),

    #[error("format error in {path}: field `{field}` at {location}: {detail}")]
    FormatError {
        path: PathBuf,
        field: String,
        /// Line number for text headers, byte offset for payloads.
        location: String,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable class name used in CLI diagnostics and exit reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::ConstantVolume { .. } => "ConstantVolume",
            Error::GeometryMismatch { .. } => "GeometryMismatch",
            Error::EmptySeeds => "EmptySeeds",
            Error::DegenerateSlice { .. } => "DegenerateSlice",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::EmptyAnnotation { .. } => "EmptyAnnotation",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::TooFewCases { .. } => "TooFewCases",
            Error::NoPositives => "NoPositives",
            Error::SpecInvalid(_) => "SpecInvalid",
            Error::FormatError { .. } => "FormatError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        location: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::FormatError {
            path: path.into(),
            field: field.into(),
            location: location.into(),
            detail: detail.into(),
        }
    }
}

use std::path::PathBuf;

/// Every failure the toolkit can report.
///
/// [`Error::kind`] gives a stable short tag that the command-line front end
/// prints as a machine-parsable prefix.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("image is {height}x{width}, smaller than the {min}x{min} minimum")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("encode failed: {0}")]
    Encode(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("tiling error: {0}")]
    Tiling(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Decode { .. } => "decode",
            Error::ImageTooSmall { .. } => "size",
            Error::Io { .. } => "io",
            Error::Encode(_) => "encode",
            Error::Manifest(_) => "manifest",
            Error::Parameter(_) => "parameter",
            Error::Tiling(_) => "tiling",
            Error::Shape(_) => "shape",
            Error::State(_) => "state",
            Error::Label(_) => "label",
            Error::Input(_) => "input",
            Error::Geometry(_) => "geometry",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::{Path, PathBuf};

/// Failures of the file-backed tooling. [`Error::exit_code`] maps them onto the CLI's
/// contract: 1 for validation and contract violations, 2 for I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error(transparent)]
    Core(#[from] caae_core::Error),
    #[error("{path}: checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint does not match the expected configuration: {}", .0.join("; "))]
    ShapeMismatch(Vec<String>),
    #[error("{path} already exists; pass --overwrite to replace it")]
    Exists { path: PathBuf },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. } | Error::Image { .. } | Error::Corrupt { .. } => 2,
            _ => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(vec![msg.into()])
    }
}

/// Attach a path to an `io::Error`.
pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

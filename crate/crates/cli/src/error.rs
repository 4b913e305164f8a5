//! Error types for file formats and the command line.

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Reasons a NIfTI-1 file is rejected.
#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("sizeof_hdr is {0}, expected 348 in either byte order")]
    BadHeaderSize(i32),
    #[error("magic is {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("dim[0] is {0}, only 3-D volumes are supported")]
    BadDim(i16),
    #[error("datatype {0} is not one of float32 (16), int16 (4), uint8 (2)")]
    UnsupportedDatatype(i16),
    #[error("vox_offset {0} is outside the file")]
    BadVoxOffset(f32),
    #[error("file truncated: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("header geometry is invalid: {0}")]
    BadGeometry(String),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Nifti { path: PathBuf, source: NiftiError },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {message}", path.display())]
    Png { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rotview_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        CliError::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 1 for usage errors, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

use thiserror::Error;
use underpass_tensor::EngineError;

use crate::arch::ArchError;
use crate::checkpoint::CheckpointError;

/// Coarse grouping used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("class `{class}` has {count} images, at least {min} required")]
    ClassTooSmall {
        class: &'static str,
        count: usize,
        min: usize,
    },
    #[error("not enough {domain} images of class `{class}`: need {need}, have {have}")]
    InsufficientPool {
        class: &'static str,
        domain: &'static str,
        need: usize,
        have: usize,
    },
    #[error("cannot downscale {from_h}x{from_w} to larger {to_h}x{to_w}")]
    Upscale {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
    #[error("image is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    Resolution {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("{0}: empty dataset")]
    EmptyDataset(&'static str),
    #[error("non-finite {component} at epoch {epoch}")]
    NonFinite { component: String, epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Arch(_) | Error::Config(_) => Category::Config,
            Error::Engine(_) | Error::NonFinite { .. } => Category::Numeric,
            Error::Checkpoint(CheckpointError::Io { .. }) | Error::Io { .. } => Category::Io,
            Error::Checkpoint(_)
            | Error::ClassTooSmall { .. }
            | Error::InsufficientPool { .. }
            | Error::Upscale { .. }
            | Error::Resolution { .. }
            | Error::EmptyDataset(_)
            | Error::Data(_)
            | Error::Image { .. }
            | Error::Csv(_) => Category::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

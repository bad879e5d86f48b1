//! Neural literal semantics, pragmatic (RSA) and literal speakers, and the
//! reference-game experiments built on them.

pub mod agents;
pub mod experiments;
pub mod nn;
pub mod scene;
pub mod semantics;
mod util;

use std::path::Path;

pub use nn::NnError;
pub use scene::SceneError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{what} diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        what: String,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl ToString) -> Self {
        Error::Format {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Synthetic single-object scenes, reference games and datasets.

mod dataset;
mod game;
mod render;
mod vocab;

pub use dataset::{
    generate_dataset, generate_games, image_name, load_dataset, write_dataset, Dataset, DatasetManifest,
    GameRecord, ManifestHeader, ReferentRecord, MANIFEST_FILE,
};
pub use game::{
    check_condition, game_rng, generate_game, ground_truth_utterance, sample_game, ContextCondition,
    ReferenceGame, Referent,
};
pub use render::{
    render, sample_scene, Distribution, EnvironmentConfig, Image, Salience, SceneConstraint, SceneSpec,
};
pub use vocab::{nouns, utterance_space, Color, Shape, Utterance, Word, BACKGROUND, NEUTRAL_FILL, VOCAB_SIZE};

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid environment: {0}")]
    Config(String),
    #[error("unsatisfiable scene constraints: {0}")]
    Unsatisfiable(String),
    #[error("`{0}` is not a valid utterance")]
    Grammar(String),
    #[error("token id {0} is not a vocabulary word")]
    UnknownToken(usize),
    #[error("game {id}: {reason}")]
    MalformedGame { id: u64, reason: String },
    #[error("png: {0}")]
    Png(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SceneError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SceneError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

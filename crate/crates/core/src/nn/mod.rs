//! Float64 tensors, a reverse-mode autodiff tape, the layers needed by the
//! CNN and GRU architectures, Adam, gradient checking and checkpoints.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod layers;
pub mod loss;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use gradcheck::gradient_check;
pub use graph::{Bound, Graph, Var};
pub use layers::{hwc_to_chw, EncoderConfig, Embedding, Head, GruCell, ImageEncoder, Linear, UtteranceEncoder};
pub use loss::{bce_loss, cross_entropy_loss, sigmoid, softmax};
pub use tensor::{ParameterSet, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Gated recurrent encoder-decoder for scoring, sampling and rescoring
//! phrase pairs.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gru;
pub mod infer;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod rng;

pub use data::{PhrasePair, PhraseTableEntry, TokenId, Vocabulary, EOS, UNK};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{CellKind, ModelConfig, ModelParams};
pub use rng::Rng;

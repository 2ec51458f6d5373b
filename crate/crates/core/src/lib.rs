//! Chunk-based simultaneous decoding for encoder-decoder sequence models.

pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod strategies;
pub mod stream;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use stream::{Chunk, ChunkOutput, CommitLog, TimedToken, TokenId, Utterance, Vocab};
pub use strategies::{Strategy, StrategyConfig};

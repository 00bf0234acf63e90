//! Whisper-family encoder–decoder inference with dense or rank-factored
//! projections.

mod bundle;
mod config;
pub mod container;
mod decoder;
mod encoder;
mod linear;
mod tokenizer;

use thiserror::Error;

pub use bundle::{
    random_orthonormal, Attention, Conv1d, DecoderLayer, EncoderLayer, LayerNorm, LinearKind, Mlp,
    ModelBundle, ParamCount,
};
pub use config::ModelConfig;
pub use container::{load_bundle, save_bundle};
pub use decoder::{decode_tokens, greedy_decode, greedy_decode_with, transcribe, DecodeOptions, Transcript};
pub use encoder::{encode, encode_counted, encode_traced, sinusoids};
pub use linear::{linear_apply, LinearLayer};
pub use tokenizer::{ByteTokenizer, Tokenizer, VocabTokenizer, BYTE_VOCAB};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("not a weight container (bad magic)")]
    BadMagic,
    #[error("container version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters of a Whisper-family encoder–decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub n_audio_ctx: usize,
    pub n_audio_layers: usize,
    pub n_text_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_vocab: usize,
    pub n_text_ctx: usize,
}

impl ModelConfig {
    /// Shapes of `tiny.en`.
    pub fn tiny_en() -> Self {
        Self {
            n_mels: 80,
            n_audio_ctx: 1500,
            n_audio_layers: 4,
            n_text_layers: 4,
            d_model: 384,
            n_heads: 6,
            n_vocab: 51_864,
            n_text_ctx: 448,
        }
    }

    /// Tiny encoder and decoder with the built-in byte tokenizer vocabulary.
    pub fn toy(layers: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            n_mels: 80,
            n_audio_ctx: 8,
            n_audio_layers: layers,
            n_text_layers: layers,
            d_model,
            n_heads,
            n_vocab: super::tokenizer::BYTE_VOCAB,
            n_text_ctx: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("n_mels", self.n_mels),
            ("n_audio_ctx", self.n_audio_ctx),
            ("n_audio_layers", self.n_audio_layers),
            ("n_text_layers", self.n_text_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_vocab", self.n_vocab),
            ("n_text_ctx", self.n_text_ctx),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
            if v > u32::MAX as usize {
                return Err(ModelError::InvalidConfig(format!("{name} does not fit in u32")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_vocab < 3 {
            return Err(ModelError::InvalidConfig("vocabulary needs room for special tokens".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    /// Mel frames the encoder consumes (the stride-2 conv halves them).
    pub fn n_frames(&self) -> usize {
        2 * self.n_audio_ctx
    }

    pub(crate) fn as_u32s(&self) -> [u32; 8] {
        [
            self.n_mels,
            self.n_audio_ctx,
            self.n_audio_layers,
            self.n_text_layers,
            self.d_model,
            self.n_heads,
            self.n_vocab,
            self.n_text_ctx,
        ]
        .map(|v| v as u32)
    }

    pub(crate) fn from_u32s(v: [u32; 8]) -> Self {
        Self {
            n_mels: v[0] as usize,
            n_audio_ctx: v[1] as usize,
            n_audio_layers: v[2] as usize,
            n_text_layers: v[3] as usize,
            d_model: v[4] as usize,
            n_heads: v[5] as usize,
            n_vocab: v[6] as usize,
            n_text_ctx: v[7] as usize,
        }
    }
}

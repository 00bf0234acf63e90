//! Audio ingest and feature extraction.
//!
//! Everything downstream of [`ingest`] works on 16 kHz mono clips. The model
//! consumes a fixed 30 second window; [`pad_or_trim`] enforces that and
//! [`log_mel`] produces the 80×3000 feature matrix fed to the encoder.

mod mel;
mod resample;
mod stnr;
mod wav;

pub use mel::{log_mel, log_mel_frames, mel_filterbank, read_mel_blob, write_mel_blob, MelFeatures};
pub use mel::{HOP_LENGTH, N_FFT, N_FRAMES_30S, N_MELS};
pub use resample::resample;
pub use stnr::{estimate_stnr, StnrEstimate};
pub use wav::{ingest, write_wav};

use thiserror::Error;

/// Target sample rate for everything past ingest.
pub const SAMPLE_RATE: u32 = 16_000;

/// Length of the model's receptive field.
pub const CHUNK_SECONDS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read audio file {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio file {0} contains no samples")]
    Empty(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("target duration must be positive, got {0}")]
    NonPositiveTarget(f64),
    #[error("expected {expected} Hz audio, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("clip too short: {0}")]
    TooShort(String),
    /// Raised when frame power is zero everywhere.
    #[error("degenerate signal")]
    DegenerateSignal,
    #[error("malformed mel blob: {0}")]
    MalformedBlob(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono audio at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioClip {
    /// Validates that the rate is positive and every sample is finite and in [-1, 1].
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::InvalidClip(format!(
                "sample {bad} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// A 16 kHz clip; samples are clamped into [-1, 1].
    pub fn from_samples_16k(samples: Vec<f32>) -> Self {
        Self {
            samples: samples
                .into_iter()
                .map(|s| if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 })
                .collect(),
            sample_rate_hz: SAMPLE_RATE,
        }
    }

    pub fn silence(seconds: f64) -> Self {
        Self {
            samples: vec![0.0; (seconds * f64::from(SAMPLE_RATE)).round() as usize],
            sample_rate_hz: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    pub(crate) fn require_16k(&self) -> Result<(), AudioError> {
        if self.sample_rate_hz != SAMPLE_RATE {
            return Err(AudioError::SampleRate {
                expected: SAMPLE_RATE,
                got: self.sample_rate_hz,
            });
        }
        Ok(())
    }
}

/// Zero-pads or truncates `clip` to exactly `target_s` seconds.
pub fn pad_or_trim(clip: &AudioClip, target_s: f64) -> Result<AudioClip, AudioError> {
    if !(target_s > 0.0) || !target_s.is_finite() {
        return Err(AudioError::NonPositiveTarget(target_s));
    }
    let target = (target_s * f64::from(clip.sample_rate_hz)).round() as usize;
    Ok(pad_or_trim_samples(clip, target))
}

pub(crate) fn pad_or_trim_samples(clip: &AudioClip, target: usize) -> AudioClip {
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    AudioClip {
        samples,
        sample_rate_hz: clip.sample_rate_hz,
    }
}

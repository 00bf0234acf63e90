//! Log-mel spectrogram in the Whisper convention.
//!
//! 400-sample Hann window, hop 160, reflect-padded centred frames, 80 Slaney
//! mel filters over 0–8 kHz, `log10` with a dynamic floor 8 decades below
//! the maximum, then `(x + 4) / 4`.

use std::io::{Read, Write};
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{pad_or_trim_samples, AudioClip, AudioError, SAMPLE_RATE};
use crate::tensor::Matrix;

pub const N_FFT: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_MELS: usize = 80;
pub const N_FRAMES_30S: usize = 3000;
const N_BINS: usize = N_FFT / 2 + 1;

/// `[n_mels × n_frames]` log-mel features.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeatures {
    values: Matrix,
}

impl MelFeatures {
    pub fn new(values: Matrix) -> Self {
        Self { values }
    }

    pub fn n_mels(&self) -> usize {
        self.values.rows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values.get(mel, frame)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let logstep = 6.4f64.ln() / 27.0;
    if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        MIN_LOG_HZ / F_SP + (f / MIN_LOG_HZ).ln() / logstep
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m < min_log_mel {
        m * F_SP
    } else {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    }
}

/// Slaney-normalised triangular filters, `[n_mels × (N_FFT/2 + 1)]`.
pub fn mel_filterbank(n_mels: usize) -> Matrix {
    let sr = f64::from(SAMPLE_RATE);
    let mel_max = hz_to_mel(sr / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    Matrix::from_fn(n_mels, N_BINS, |m, k| {
        let f = k as f64 * sr / N_FFT as f64;
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        let rise = (f - lo) / (mid - lo);
        let fall = (hi - f) / (hi - mid);
        let w = rise.min(fall).max(0.0);
        (w * 2.0 / (hi - lo)) as f32
    })
}

fn filters() -> &'static Matrix {
    static F: OnceLock<Matrix> = OnceLock::new();
    F.get_or_init(|| mel_filterbank(N_MELS))
}

fn hann() -> &'static [f32] {
    static W: OnceLock<Vec<f32>> = OnceLock::new();
    W.get_or_init(|| {
        (0..N_FFT)
            .map(|n| {
                (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64).cos()) as f32
            })
            .collect()
    })
}

/// Log-mel features of the clip padded or trimmed to 30 s (3000 frames).
pub fn log_mel(clip: &AudioClip) -> Result<MelFeatures, AudioError> {
    log_mel_frames(clip, N_FRAMES_30S)
}

/// Log-mel features with the clip padded or trimmed to `n_frames · 160` samples.
pub fn log_mel_frames(clip: &AudioClip, n_frames: usize) -> Result<MelFeatures, AudioError> {
    clip.require_16k()?;
    let target = n_frames * HOP_LENGTH;
    if target < N_FFT {
        return Err(AudioError::TooShort(format!(
            "{n_frames} frames cover {target} samples, less than one {N_FFT}-sample window"
        )));
    }
    let clip = pad_or_trim_samples(clip, target);
    let x = clip.samples();

    // Reflect padding by N_FFT/2 on both sides (centred frames).
    let pad = N_FFT / 2;
    let mut padded = Vec::with_capacity(x.len() + 2 * pad);
    padded.extend((1..=pad).rev().map(|i| x[i]));
    padded.extend_from_slice(x);
    padded.extend((0..pad).map(|i| x[x.len() - 2 - i]));

    let fft = FftPlanner::<f32>::new().plan_fft_forward(N_FFT);
    let window = hann();
    let mut power = Matrix::zeros(n_frames, N_BINS);
    let mut buf = vec![Complex::new(0.0f32, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    for frame in 0..n_frames {
        let start = frame * HOP_LENGTH;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(padded[start + n] * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, p) in power.row_mut(frame).iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
    }

    let fb = filters();
    let mut mel = Matrix::zeros(N_MELS, n_frames);
    let mut max = f32::NEG_INFINITY;
    for m in 0..N_MELS {
        let w = fb.row(m);
        for t in 0..n_frames {
            let e: f32 = w.iter().zip(power.row(t)).map(|(a, b)| a * b).sum();
            let v = e.max(1e-10).log10();
            max = max.max(v);
            mel.set(m, t, v);
        }
    }
    let floor = max - 8.0;
    for v in mel.as_mut_slice() {
        *v = (v.max(floor) + 4.0) / 4.0;
    }
    Ok(MelFeatures::new(mel))
}

/// Writes features as `u32 n_mels, u32 n_frames` followed by little-endian `f32`s, row-major.
pub fn write_mel_blob(mut w: impl Write, mel: &MelFeatures) -> Result<(), AudioError> {
    w.write_all(&(mel.n_mels() as u32).to_le_bytes())?;
    w.write_all(&(mel.n_frames() as u32).to_le_bytes())?;
    for v in mel.values().as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mel_blob(mut r: impl Read) -> Result<MelFeatures, AudioError> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|e| AudioError::MalformedBlob(e.to_string()))?;
    let n_mels = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    let n_frames = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n_mels * n_frames * 4 {
        return Err(AudioError::MalformedBlob(format!(
            "expected {} payload bytes, found {}",
            n_mels * n_frames * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MelFeatures::new(Matrix::from_vec(n_mels, n_frames, data)))
}

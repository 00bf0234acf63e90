use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::resample::resample;
use super::{AudioClip, AudioError, SAMPLE_RATE};

const MIN_RATE: u32 = 8_000;
const MAX_RATE: u32 = 192_000;

/// Reads a PCM WAV file, averages channels, and resamples to 16 kHz.
pub fn ingest(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = WavReader::open(path).map_err(|e| map_hound(e, &shown))?;
    let spec = reader.spec();
    if !(MIN_RATE..=MAX_RATE).contains(&spec.sample_rate) {
        return Err(AudioError::UnsupportedEncoding(format!(
            "sample rate {} Hz outside {MIN_RATE}..={MAX_RATE}",
            spec.sample_rate
        )));
    }
    let channels = usize::from(spec.channels.max(1));

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (f64::from(v) * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(|e| map_hound(e, &shown))?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(e, &shown))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{fmt:?} samples with {bits} bits"
            )))
        }
    };

    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().map(|&v| f64::from(v)).sum::<f64>() / channels as f64) as f32)
        .map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 })
        .collect();
    if mono.is_empty() {
        return Err(AudioError::Empty(shown));
    }
    let samples = resample(&mono, spec.sample_rate, SAMPLE_RATE);
    AudioClip::new(samples, SAMPLE_RATE)
}

fn map_hound(err: hound::Error, path: &str) -> AudioError {
    match err {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("non-PCM WAV format".into()),
        hound::Error::FormatError(msg) if msg.contains("format") || msg.contains("compression") => {
            AudioError::UnsupportedEncoding(msg.to_string())
        }
        other => AudioError::Unreadable {
            path: path.to_string(),
            reason: other.to_string(),
        },
    }
}

/// Writes a clip as 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let shown = path.as_ref().display().to_string();
    let mut w = WavWriter::create(path, spec).map_err(|e| map_hound(e, &shown))?;
    for &s in clip.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| map_hound(e, &shown))?;
    }
    w.finalize().map_err(|e| map_hound(e, &shown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, rate: u32, channels: u16, frames: &[Vec<i16>]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for f in frames {
            for &s in f {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn sixteen_khz_mono_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let frames: Vec<Vec<i16>> = (0..160_000).map(|i| vec![((i % 200) as i16 - 100) * 50]).collect();
        write_raw(&p, 16_000, 1, &frames);
        let clip = ingest(&p).unwrap();
        assert_eq!(clip.samples().len(), 160_000);
        assert_eq!(clip.duration_s(), 10.0);
        for (i, &s) in clip.samples().iter().enumerate().take(1000) {
            assert_eq!(s, f32::from(frames[i][0]) / 32768.0);
        }
    }

    #[test]
    fn forty_eight_khz_is_downsampled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_raw(&p, 48_000, 1, &vec![vec![1000i16]; 48_000]);
        let clip = ingest(&p).unwrap();
        assert_eq!(clip.samples().len(), 16_000);
        assert_eq!(clip.duration_s(), 1.0);
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_raw(&p, 16_000, 2, &vec![vec![16384i16, -16384]; 8000]);
        let clip = ingest(&p).unwrap();
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.wav");
        assert!(matches!(ingest(&missing), Err(AudioError::Unreadable { .. })));

        let empty = dir.path().join("empty.wav");
        write_raw(&empty, 16_000, 1, &[]);
        assert!(matches!(ingest(&empty), Err(AudioError::Empty(_))));

        // WAVE_FORMAT_ALAW (6)
        let alaw = dir.path().join("alaw.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&6u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 1, 2, 3]);
        std::fs::write(&alaw, bytes).unwrap();
        assert!(matches!(ingest(&alaw), Err(AudioError::UnsupportedEncoding(_))));

        let garbage = dir.path().join("garbage.wav");
        std::fs::write(&garbage, b"not a wav file at all").unwrap();
        assert!(matches!(ingest(&garbage), Err(AudioError::Unreadable { .. })));
    }

    #[test]
    fn write_then_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let clip = AudioClip::from_samples_16k((0..1600).map(|i| (i as f32 / 1600.0) - 0.5).collect());
        write_wav(&p, &clip).unwrap();
        let back = ingest(&p).unwrap();
        assert!(back.samples().iter().zip(clip.samples()).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}

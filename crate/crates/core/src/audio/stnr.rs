//! Frame-power speech-to-noise ratio estimate.

use serde::Serialize;

use super::{AudioClip, AudioError};

const FRAME_S: f64 = 0.020;
const HOP_S: f64 = 0.010;
const BIN_DB: f64 = 1.0;
const SPEECH_PERCENTILE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StnrEstimate {
    pub stnr_db: f64,
    pub speech_level_db: f64,
    pub noise_level_db: f64,
}

/// Estimates STNR from the distribution of 20 ms frame powers.
///
/// The noise level is the mode of a 1 dB histogram restricted to the bins
/// covering the lower half of the observed power range (reported as the
/// mean power of the frames in the modal bin); the speech level is the 95th percentile.
/// Frames with zero power are ignored.
pub fn estimate_stnr(clip: &AudioClip) -> Result<StnrEstimate, AudioError> {
    let rate = f64::from(clip.sample_rate_hz());
    if clip.samples().iter().all(|&v| v == 0.0) {
        return Err(AudioError::DegenerateSignal);
    }
    if clip.duration_s() < 1.0 {
        return Err(AudioError::TooShort(format!(
            "STNR needs at least 1 s of audio, got {:.3} s",
            clip.duration_s()
        )));
    }
    let frame = (FRAME_S * rate).round() as usize;
    let hop = (HOP_S * rate).round() as usize;
    let x = clip.samples();

    let mut powers_db: Vec<f64> = (0..=(x.len() - frame) / hop)
        .filter_map(|i| {
            let seg = &x[i * hop..i * hop + frame];
            let p = seg.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / frame as f64;
            (p > 0.0).then(|| 10.0 * p.log10())
        })
        .collect();
    if powers_db.is_empty() {
        return Err(AudioError::DegenerateSignal);
    }
    powers_db.sort_by(f64::total_cmp);

    let lo = powers_db[0];
    let hi = powers_db[powers_db.len() - 1];
    let mid = 0.5 * (lo + hi);

    // 1 dB bins anchored at the minimum; keep every bin that starts in the
    // lower half, including the one straddling the midpoint.
    let n_bins = ((mid - lo) / BIN_DB).floor() as usize + 1;
    let mut counts = vec![0usize; n_bins];
    let mut sums = vec![0.0f64; n_bins];
    for &p in &powers_db {
        let b = ((p - lo) / BIN_DB).floor() as usize;
        if b >= n_bins {
            break;
        }
        counts[b] += 1;
        sums[b] += p;
    }
    let mode = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let noise_level_db = sums[mode] / counts[mode] as f64;

    let rank = SPEECH_PERCENTILE * (powers_db.len() - 1) as f64;
    let (i, frac) = (rank.floor() as usize, rank.fract());
    let speech_level_db = if i + 1 < powers_db.len() {
        powers_db[i] * (1.0 - frac) + powers_db[i + 1] * frac
    } else {
        powers_db[i]
    };

    Ok(StnrEstimate {
        stnr_db: speech_level_db - noise_level_db,
        speech_level_db,
        noise_level_db,
    })
}

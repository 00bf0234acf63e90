//! Rational-ratio polyphase resampler with a Kaiser-windowed sinc kernel.

const TAPS: usize = 64;
const HALF: isize = (TAPS / 2) as isize;
const KAISER_BETA: f64 = 8.6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(u: f64) -> f64 {
    if u.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / bessel_i0(KAISER_BETA)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// One 64-tap filter per output phase. Tap `j` of phase `p` weights input
/// sample `floor(t) + j - 31` for an output at fractional position `p / up`.
fn build_phases(up: usize, down: usize) -> Vec<[f64; TAPS]> {
    let cutoff = (up as f64 / down as f64).min(1.0);
    (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps = [0.0; TAPS];
            for (j, tap) in taps.iter_mut().enumerate() {
                let offset = j as isize - (HALF - 1);
                let tau = frac - offset as f64;
                *tap = cutoff * sinc(cutoff * tau) * kaiser(tau / HALF as f64);
            }
            let sum: f64 = taps.iter().sum();
            if sum != 0.0 {
                for t in &mut taps {
                    *t /= sum;
                }
            }
            taps
        })
        .collect()
}

/// Resamples `samples` from `from_hz` to `to_hz`.
///
/// Output length is `ceil(n · to / from)`; equal rates return the input unchanged.
pub fn resample(samples: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if from_hz == to_hz || samples.is_empty() {
        return samples.to_vec();
    }
    let g = gcd(u64::from(from_hz), u64::from(to_hz));
    let up = (u64::from(to_hz) / g) as usize;
    let down = (u64::from(from_hz) / g) as usize;
    let phases = build_phases(up, down);
    let n_in = samples.len();
    let n_out = (n_in * up).div_ceil(down);

    (0..n_out)
        .map(|n| {
            let pos = n * down;
            let base = (pos / up) as isize;
            let taps = &phases[pos % up];
            let mut acc = 0.0f64;
            for (j, &w) in taps.iter().enumerate() {
                let idx = base + j as isize - (HALF - 1);
                if idx >= 0 && (idx as usize) < n_in {
                    acc += w * f64::from(samples[idx as usize]);
                }
            }
            (acc as f32).clamp(-1.0, 1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_to_one_length() {
        let x = vec![0.1f32; 48_000];
        assert_eq!(resample(&x, 48_000, 16_000).len(), 16_000);
    }

    #[test]
    fn dc_is_preserved_in_the_interior() {
        let x = vec![0.5f32; 44_100];
        let y = resample(&x, 44_100, 16_000);
        for &v in &y[100..y.len() - 100] {
            assert!((v - 0.5).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn low_tone_survives_downsampling() {
        let from = 48_000u32;
        let x: Vec<f32> = (0..from as usize)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / from as f32).sin())
            .collect();
        let y = resample(&x, from, 16_000);
        for (n, &v) in y.iter().enumerate().skip(64).take(15_000) {
            let expect = 0.5 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin();
            assert!((f64::from(v) - expect).abs() < 2e-3, "n={n} got {v} want {expect}");
        }
    }

    #[test]
    fn tone_above_new_nyquist_is_attenuated() {
        let from = 48_000u32;
        let x: Vec<f32> = (0..from as usize)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * 12_000.0 * i as f32 / from as f32).sin())
            .collect();
        let y = resample(&x, from, 16_000);
        let rms = (y[100..15_900].iter().map(|v| v * v).sum::<f32>() / 15_800.0).sqrt();
        assert!(rms < 0.01, "rms {rms}");
    }

    proptest! {
        #[test]
        fn duration_preserved_within_one_sample(n in 1usize..5000, rate in prop::sample::select(vec![8000u32, 11025, 22050, 32000, 44100, 48000, 96000, 192000])) {
            let x = vec![0.0f32; n];
            let y = resample(&x, rate, 16_000);
            let din = n as f64 / f64::from(rate);
            let dout = y.len() as f64 / 16_000.0;
            prop_assert!((dout - din).abs() <= 1.0 / 16_000.0 + 1e-12);
        }
    }
}

//! Band-limited resampling by windowed-sinc interpolation.

use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side of the centre tap.
const ZERO_CROSSINGS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Output length for `n` input samples: `round(n * to / from)`.
pub fn resampled_len(n: usize, from: u32, to: u32) -> usize {
    ((n as u128 * to as u128 + from as u128 / 2) / from as u128) as usize
}

/// Resamples `input` from `from` Hz to `to` Hz. Equal rates return the input unchanged.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    // Low-pass at the lower Nyquist, slightly inside it.
    let cutoff = ratio.min(1.0) * 0.97;
    let half_width = ZERO_CROSSINGS / cutoff;
    let out_len = resampled_len(input.len(), from, to);
    let step = from as f64 / to as f64;
    let n = input.len() as isize;

    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let lo = (t - half_width).ceil().max(0.0) as isize;
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                let d = j as f64 - t;
                // Hann window over [-half_width, half_width]
                let w = 0.5 + 0.5 * (PI * d / half_width).cos();
                acc += input[j as usize] as f64 * cutoff * sinc(cutoff * d) * w;
            }
            acc as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, secs: f64) -> Vec<f32> {
        let n = (rate as f64 * secs) as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn identity_when_rates_match() {
        let x = tone(440.0, 16_000, 0.1);
        assert_eq!(resample(&x, 16_000, 16_000), x);
    }

    #[test]
    fn length_scales_by_rate_ratio() {
        let x = vec![0.0f32; 32_000 * 10];
        assert_eq!(resample(&x, 32_000, 16_000).len(), 160_000);
        assert_eq!(resampled_len(44_100, 44_100, 16_000), 16_000);
    }

    #[test]
    fn passband_tone_survives_downsampling() {
        let x = tone(1000.0, 48_000, 0.5);
        let y = resample(&x, 48_000, 16_000);
        let reference = tone(1000.0, 16_000, 0.5);
        // ignore the edges where the kernel runs off the signal
        let err = y[200..7800]
            .iter()
            .zip(&reference[200..7800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 0.05, "max error {err}");
    }

    #[test]
    fn stopband_tone_is_attenuated() {
        // 12 kHz is above the 8 kHz target Nyquist.
        let x = tone(12_000.0, 48_000, 0.5);
        let y = resample(&x, 48_000, 16_000);
        let rms = (y[200..7800].iter().map(|v| v * v).sum::<f32>() / 7600.0).sqrt();
        assert!(rms < 0.02, "rms {rms}");
    }
}

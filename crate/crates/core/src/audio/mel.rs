//! Log-mel spectrogram front end.
//!
//! Frames are centred with reflection padding, windowed with a periodic Hann
//! window and transformed with a 1024-point FFT at a 512-sample hop. Power
//! spectra are projected onto 128 triangular bands (Slaney mel scale, area
//! normalised) spanning 0 Hz to Nyquist and log-compressed after adding 1e-10.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioSegment, SAMPLE_RATE, SEGMENT_SAMPLES};

pub const N_FFT: usize = 1024;
pub const HOP: usize = 512;
pub const N_MELS: usize = 128;
pub const LOG_EPS: f64 = 1e-10;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = SAMPLE_RATE as f64 / 2.0;
/// `1 + floor(320000 / 512)`
pub const SEGMENT_FRAMES: usize = 1 + SEGMENT_SAMPLES / HOP;

/// Log-scaled mel energies, row-major `[N_MELS x frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub frames: usize,
}

impl MelSpectrogram {
    pub fn bands(&self) -> usize {
        N_MELS
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.frames + frame]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        &self.values[band * self.frames..(band + 1) * self.frames]
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    }
}

/// Peak frequency of each band.
pub fn band_centers() -> Vec<f64> {
    band_edges()[1..=N_MELS].to_vec()
}

fn band_edges() -> Vec<f64> {
    let lo = hz_to_mel(F_MIN);
    let hi = hz_to_mel(F_MAX);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Sparse triangular filter: weights for FFT bins `start..start + weights.len()`.
struct Filter {
    start: usize,
    weights: Vec<f64>,
}

struct Extractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Filter>,
}

impl Extractor {
    fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let window = (0..N_FFT)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / N_FFT as f64).cos())
            .collect();
        let n_bins = N_FFT / 2 + 1;
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64)
            .collect();
        let edges = band_edges();
        let filters = (0..N_MELS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (hi - lo);
                let w: Vec<(usize, f64)> = bin_hz
                    .iter()
                    .enumerate()
                    .filter_map(|(k, &f)| {
                        let up = (f - lo) / (mid - lo);
                        let down = (hi - f) / (hi - mid);
                        let v = up.min(down).max(0.0) * norm;
                        (v > 0.0).then_some((k, v))
                    })
                    .collect();
                match (w.first(), w.last()) {
                    (Some(&(start, _)), Some(&(end, _))) => {
                        let mut weights = vec![0.0; end - start + 1];
                        for (k, v) in w {
                            weights[k - start] = v;
                        }
                        Filter { start, weights }
                    }
                    _ => Filter {
                        start: 0,
                        weights: Vec::new(),
                    },
                }
            })
            .collect();
        Self {
            fft,
            window,
            filters,
        }
    }
}

fn extractor() -> &'static Extractor {
    static EXTRACTOR: OnceLock<Extractor> = OnceLock::new();
    EXTRACTOR.get_or_init(Extractor::new)
}

/// Reflect-pads by `pad` on each side (numpy "reflect": edge sample not repeated).
fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let reflect = |i: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - j;
        }
        j as usize
    };
    (-(pad as isize)..n + pad as isize)
        .map(|i| x[reflect(i)] as f64)
        .collect()
}

/// Log-mel spectrogram of arbitrary-length audio at 16 kHz.
pub fn log_mel(samples: &[f32]) -> MelSpectrogram {
    let ex = extractor();
    if samples.is_empty() {
        return MelSpectrogram {
            values: Vec::new(),
            frames: 0,
        };
    }
    let padded = reflect_pad(samples, N_FFT / 2);
    let frames = 1 + samples.len() / HOP;
    let mut values = vec![0f32; N_MELS * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); ex.fft.get_inplace_scratch_len()];
    let mut power = vec![0.0f64; N_FFT / 2 + 1];

    for t in 0..frames {
        let frame = &padded[t * HOP..t * HOP + N_FFT];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&ex.window) {
            *b = Complex::new(x * w, 0.0);
        }
        ex.fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, f) in ex.filters.iter().enumerate() {
            let e: f64 = f
                .weights
                .iter()
                .zip(&power[f.start..])
                .map(|(w, p)| w * p)
                .sum();
            values[m * frames + t] = (e + LOG_EPS).ln() as f32;
        }
    }
    MelSpectrogram { values, frames }
}

/// Log-mel spectrogram of one 20 s segment: always `[128 x 626]`.
pub fn mel_spectrogram(segment: &AudioSegment) -> MelSpectrogram {
    log_mel(&segment.samples)
}

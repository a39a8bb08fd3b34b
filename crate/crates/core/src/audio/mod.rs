//! Waveform loading, resampling, fixed-length segmentation and log-mel features.

mod decode;
pub mod mel;
pub mod resample;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mel::{mel_spectrogram, MelSpectrogram, N_MELS, SEGMENT_FRAMES};

pub const SAMPLE_RATE: u32 = 16_000;
pub const SEGMENT_SECONDS: f64 = 20.0;
pub const SEGMENT_SAMPLES: usize = 320_000;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn resampled(&self, target_rate: u32) -> Waveform {
        Waveform {
            samples: resample::resample(&self.samples, self.sample_rate, target_rate),
            sample_rate: target_rate,
        }
    }
}

/// Exactly 20 s of 16 kHz audio, zero-padded where the track ran out.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f32>,
    pub start_sec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPolicy {
    /// One uniformly placed segment (training).
    Random,
    /// Consecutive non-overlapping segments covering the track (evaluation).
    Slide,
    /// The first segment only, zero-padded if the track is short.
    PadSingle,
}

/// Decodes `uri`, averages channels to mono and resamples to `target_rate`.
pub fn load_and_resample(uri: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let decoded = decode::decode_file(uri.as_ref())?;
    let mono = decoded.to_mono();
    if mono.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(Error::Decode("non-finite samples".into()));
    }
    Ok(Waveform::new(mono, decoded.sample_rate).resampled(target_rate))
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Decode(e.to_string()))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(|e| Error::Decode(e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::Decode(e.to_string()))?;
    Ok(())
}

fn take_segment(samples: &[f32], start: usize, len: usize, rate: u32) -> AudioSegment {
    let mut out = vec![0.0f32; len];
    let end = (start + len).min(samples.len());
    if start < end {
        out[..end - start].copy_from_slice(&samples[start..end]);
    }
    AudioSegment {
        samples: out,
        start_sec: start as f64 / rate as f64,
    }
}

/// Cuts `length_sec` windows from a waveform according to `policy`.
pub fn segment<R: Rng + ?Sized>(
    wave: &Waveform,
    length_sec: f64,
    policy: SegmentPolicy,
    rng: &mut R,
) -> Vec<AudioSegment> {
    let len = (length_sec * wave.sample_rate as f64).round() as usize;
    let n = wave.samples.len();
    match policy {
        SegmentPolicy::Random => {
            let start = if n > len { rng.gen_range(0..=n - len) } else { 0 };
            vec![take_segment(&wave.samples, start, len, wave.sample_rate)]
        }
        SegmentPolicy::PadSingle => vec![take_segment(&wave.samples, 0, len, wave.sample_rate)],
        SegmentPolicy::Slide => {
            let count = n.div_ceil(len).max(1);
            (0..count)
                .map(|i| take_segment(&wave.samples, i * len, len, wave.sample_rate))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(secs: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        Waveform::new((0..n).map(|i| (i % 1000) as f32 / 1000.0).collect(), SAMPLE_RATE)
    }

    #[test]
    fn slide_covers_track_and_pads_last() {
        let w = ramp(30.0);
        let segs = segment(&w, SEGMENT_SECONDS, SegmentPolicy::Slide, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].start_sec, 0.0);
        assert_eq!(segs[1].start_sec, 20.0);
        assert!(segs.iter().all(|s| s.samples.len() == SEGMENT_SAMPLES));
        assert!(segs[1].samples[160_000..].iter().all(|&v| v == 0.0));
        let joined: Vec<f32> = segs.iter().flat_map(|s| s.samples.iter().copied()).collect();
        assert_eq!(&joined[..w.samples.len()], &w.samples[..]);
    }

    #[test]
    fn pad_single_zero_pads_short_track() {
        let w = ramp(5.0);
        let segs = segment(&w, SEGMENT_SECONDS, SegmentPolicy::PadSingle, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(segs.len(), 1);
        let tail = &segs[0].samples[80_000..];
        assert_eq!(tail.len(), 240_000);
        assert!(tail.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_start_is_seeded_and_in_range() {
        let w = ramp(60.0);
        let a = segment(&w, SEGMENT_SECONDS, SegmentPolicy::Random, &mut ChaCha8Rng::seed_from_u64(9));
        let b = segment(&w, SEGMENT_SECONDS, SegmentPolicy::Random, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!((0.0..=40.0).contains(&a[0].start_sec));
    }

    #[test]
    fn stereo_antiphase_averages_to_silence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..1600 {
            let v = ((i as f32 * 0.05).sin() * 10_000.0) as i16;
            w.write_sample(v).unwrap();
            w.write_sample(-v).unwrap();
        }
        w.finalize().unwrap();
        let wave = load_and_resample(&path, SAMPLE_RATE).unwrap();
        assert_eq!(wave.samples.len(), 1600);
        assert!(wave.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn identity_path_keeps_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mono.wav");
        let wave = Waveform::new((0..800).map(|i| ((i % 7) as f32 - 3.0) / 8.0).collect(), SAMPLE_RATE);
        write_wav(&path, &wave).unwrap();
        let back = load_and_resample(&path, SAMPLE_RATE).unwrap();
        assert_eq!(back.sample_rate, SAMPLE_RATE);
        for (a, b) in back.samples.iter().zip(&wave.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn missing_and_empty_files() {
        assert!(matches!(
            load_and_resample("/no/such/file.wav", SAMPLE_RATE),
            Err(Error::MissingFile(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        write_wav(&path, &Waveform::new(Vec::new(), SAMPLE_RATE)).unwrap();
        assert!(matches!(load_and_resample(&path, SAMPLE_RATE), Err(Error::EmptyAudio)));
        let junk = dir.path().join("junk.mp3");
        std::fs::write(&junk, b"definitely not audio").unwrap();
        assert!(matches!(load_and_resample(&junk, SAMPLE_RATE), Err(Error::Decode(_))));
    }
}

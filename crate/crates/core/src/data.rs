//! Decoded-track cache and batch assembly shared by training and evaluation.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::audio::{self, AudioSegment, MelSpectrogram, SegmentPolicy, Waveform, SAMPLE_RATE, SEGMENT_SECONDS};
use crate::corpus::{Source, TrackRecord};
use crate::error::Result;
use crate::midi::{self, BarGrid, NoteEvent, TokenSequence};
use crate::text::{compose_with_dropout, tokenize_text, TextTokenIds, Vocab};

/// Decoded audio and MIDI for one track.
#[derive(Debug, Clone)]
pub struct TrackData {
    pub wave: Arc<Waveform>,
    pub notes: Arc<Vec<NoteEvent>>,
    pub grid: Arc<BarGrid>,
}

impl TrackData {
    /// Token window aligned to an audio segment.
    pub fn tokens_for(&self, segment: &AudioSegment) -> TokenSequence {
        midi::tokenize_segment(&self.notes, &self.grid, segment.start_sec, SEGMENT_SECONDS)
    }
}

/// Bounded caches of decoded tracks and log-mel spectrograms.
#[derive(Debug)]
pub struct DataCache {
    tracks: HashMap<String, TrackData>,
    mels: HashMap<(String, u64), Arc<MelSpectrogram>>,
    max_tracks: usize,
    max_mels: usize,
}

impl Default for DataCache {
    fn default() -> Self {
        Self::new(2048, 512)
    }
}

impl DataCache {
    pub fn new(max_tracks: usize, max_mels: usize) -> Self {
        Self {
            tracks: HashMap::new(),
            mels: HashMap::new(),
            max_tracks: max_tracks.max(1),
            max_mels: max_mels.max(1),
        }
    }

    pub fn track(&mut self, rec: &TrackRecord) -> Result<TrackData> {
        if let Some(t) = self.tracks.get(&rec.id) {
            return Ok(t.clone());
        }
        let wave = audio::load_and_resample(&rec.audio_uri, SAMPLE_RATE)?;
        let (notes, grid) = midi::parse_midi(&rec.midi_uri)?;
        let t = TrackData {
            wave: Arc::new(wave),
            notes: Arc::new(notes),
            grid: Arc::new(grid),
        };
        if self.tracks.len() >= self.max_tracks {
            self.tracks.clear();
        }
        self.tracks.insert(rec.id.clone(), t.clone());
        Ok(t)
    }

    pub fn mel(&mut self, id: &str, segment: &AudioSegment) -> Arc<MelSpectrogram> {
        let key = (id.to_string(), (segment.start_sec * SAMPLE_RATE as f64).round() as u64);
        if let Some(m) = self.mels.get(&key) {
            return m.clone();
        }
        let m = Arc::new(audio::mel_spectrogram(segment));
        if self.mels.len() >= self.max_mels {
            self.mels.clear();
        }
        self.mels.insert(key, m.clone());
        m
    }

    /// Consecutive 20 s windows of a track with their mels and token sequences.
    pub fn slide(&mut self, rec: &TrackRecord) -> Result<Vec<(Arc<MelSpectrogram>, TokenSequence)>> {
        let t = self.track(rec)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let segs = audio::segment(&t.wave, SEGMENT_SECONDS, SegmentPolicy::Slide, &mut rng);
        Ok(segs
            .iter()
            .map(|s| (self.mel(&rec.id, s), t.tokens_for(s)))
            .collect())
    }
}

/// Aligned training triples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub sources: Vec<Source>,
    pub mels: Vec<Arc<MelSpectrogram>>,
    pub tokens: Vec<TokenSequence>,
    pub texts: Vec<TextTokenIds>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mel_refs(&self) -> Vec<&MelSpectrogram> {
        self.mels.iter().map(|m| m.as_ref()).collect()
    }

    pub fn token_refs(&self) -> Vec<&TokenSequence> {
        self.tokens.iter().collect()
    }

    pub fn text_refs(&self) -> Vec<&TextTokenIds> {
        self.texts.iter().collect()
    }

    pub fn weak_count(&self) -> usize {
        self.sources.iter().filter(|s| **s == Source::Weak).count()
    }
}

/// One random 20 s window per record, the MIDI bars under it, and a
/// dropout-composed text.
pub fn prepare_batch<R: Rng + ?Sized>(
    records: &[&TrackRecord],
    cache: &mut DataCache,
    vocab: &Vocab,
    keep_prob: f64,
    rng: &mut R,
) -> Result<Batch> {
    let mut b = Batch {
        ids: Vec::with_capacity(records.len()),
        sources: Vec::with_capacity(records.len()),
        mels: Vec::with_capacity(records.len()),
        tokens: Vec::with_capacity(records.len()),
        texts: Vec::with_capacity(records.len()),
    };
    for rec in records {
        let t = cache.track(rec)?;
        let seg = audio::segment(&t.wave, SEGMENT_SECONDS, SegmentPolicy::Random, rng).remove(0);
        let text = compose_with_dropout(&rec.texts, rng, keep_prob)?;
        b.mels.push(cache.mel(&rec.id, &seg));
        b.tokens.push(t.tokens_for(&seg));
        b.texts.push(tokenize_text(&text, vocab));
        b.ids.push(rec.id.clone());
        b.sources.push(rec.source);
    }
    Ok(b)
}

//! Synthetic corpora: additive-synthesis audio, matching MIDI files, tag
//! texts and a manifest. Used by tests, the acceptance suite and `tribind synth`.

use std::f32::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform, SAMPLE_RATE};
use crate::corpus::{load_manifest, write_manifest, DatasetManifest, Source, Split, TrackRecord};
use crate::error::Result;
use crate::midi::{write_midi, MidiLayout, NoteEvent, DEFAULT_BPM};
use crate::text::TextElement;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthNote {
    pub onset_sec: f64,
    pub duration_sec: f64,
    pub pitch: u8,
    pub velocity: u8,
}

/// Relative harmonic amplitudes and an exponential decay rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timbre {
    pub harmonics: Vec<f32>,
    pub decay_per_sec: f32,
}

impl Default for Timbre {
    fn default() -> Self {
        Self {
            harmonics: vec![1.0, 0.5, 0.33, 0.25],
            decay_per_sec: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrack {
    pub id: String,
    /// Written to the MIDI file.
    pub midi_notes: Vec<SynthNote>,
    /// Rendered to audio; usually identical to `midi_notes`.
    pub audio_notes: Vec<SynthNote>,
    pub timbre: Timbre,
    pub texts: Vec<TextElement>,
    pub source: Source,
    pub split: Option<Split>,
    pub duration_sec: f64,
}

fn midi_hz(pitch: u8) -> f32 {
    440.0 * 2f32.powf((pitch as f32 - 69.0) / 12.0)
}

/// Additive synthesis at 16 kHz, peak-normalized to 0.5.
pub fn render(notes: &[SynthNote], timbre: &Timbre, duration_sec: f64) -> Waveform {
    let sr = SAMPLE_RATE as f32;
    let n = (duration_sec * SAMPLE_RATE as f64).round() as usize;
    let mut out = vec![0f32; n];
    let attack = (0.005 * sr) as usize;
    let release = (0.05 * sr) as usize;
    for note in notes {
        let start = (note.onset_sec * SAMPLE_RATE as f64).round() as usize;
        let held = (note.duration_sec * SAMPLE_RATE as f64).round() as usize;
        let f0 = midi_hz(note.pitch);
        let amp = note.velocity as f32 / 127.0;
        for i in 0..held + release {
            let Some(slot) = out.get_mut(start + i) else { break };
            let t = i as f32 / sr;
            let mut env = amp * (-timbre.decay_per_sec * t).exp();
            if i < attack {
                env *= i as f32 / attack as f32;
            }
            if i >= held {
                env *= 1.0 - (i - held) as f32 / release as f32;
            }
            let mut s = 0f32;
            for (k, h) in timbre.harmonics.iter().enumerate() {
                let f = f0 * (k + 1) as f32;
                if f < sr / 2.0 {
                    s += h * (TAU * f * t).sin();
                }
            }
            *slot += env * s;
        }
    }
    let peak = out.iter().fold(0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Waveform::new(out, SAMPLE_RATE)
}

/// Converts to MIDI note events at the default 120 BPM.
pub fn note_events(notes: &[SynthNote]) -> Vec<NoteEvent> {
    let beats_per_sec = DEFAULT_BPM / 60.0;
    notes
        .iter()
        .map(|n| NoteEvent {
            onset_sec: n.onset_sec,
            onset_beats: n.onset_sec * beats_per_sec,
            pitch: n.pitch,
            duration_beats: n.duration_sec * beats_per_sec,
            velocity: n.velocity,
        })
        .collect()
}

/// Writes `audio/<id>.wav`, `midi/<id>.mid` and `manifest.jsonl` under
/// `dir`, then loads the manifest back (paths resolved against `dir`).
pub fn write_corpus(dir: impl AsRef<Path>, tracks: &[SynthTrack]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("audio"))?;
    std::fs::create_dir_all(dir.join("midi"))?;
    let mut records = Vec::with_capacity(tracks.len());
    for t in tracks {
        let audio = format!("audio/{}.wav", t.id);
        let midi = format!("midi/{}.mid", t.id);
        write_wav(dir.join(&audio), &render(&t.audio_notes, &t.timbre, t.duration_sec))?;
        write_midi(dir.join(&midi), &note_events(&t.midi_notes), &MidiLayout::default())?;
        records.push(TrackRecord {
            id: t.id.clone(),
            audio_uri: audio.into(),
            midi_uri: midi.into(),
            texts: t.texts.clone(),
            source: t.source,
            split: t.split,
            duration_sec: t.duration_sec,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&DatasetManifest::new(records), &path)?;
    load_manifest(&path)
}

/// Notes drawn from `[lo, hi]` at a steady rate of `per_sec` onsets.
pub fn pattern<R: Rng + ?Sized>(rng: &mut R, lo: u8, hi: u8, per_sec: f64, duration_sec: f64) -> Vec<SynthNote> {
    let step = 1.0 / per_sec;
    let count = (duration_sec / step).floor() as usize;
    (0..count)
        .map(|i| SynthNote {
            onset_sec: i as f64 * step,
            duration_sec: step * 0.8,
            pitch: rng.gen_range(lo..=hi),
            velocity: rng.gen_range(70..=100),
        })
        .collect()
}

const COLORS: [&str; 16] = [
    "amber", "azure", "crimson", "ebony", "emerald", "golden", "indigo", "ivory", "jade", "lilac", "ochre",
    "pearl", "ruby", "scarlet", "silver", "violet",
];
const ANIMALS: [&str; 16] = [
    "badger", "crane", "dolphin", "falcon", "gecko", "heron", "ibex", "jackal", "koala", "lynx", "marten",
    "newt", "otter", "panda", "quail", "raven",
];
pub const REGISTER_WORDS: [&str; 4] = ["deep", "low", "middle", "high"];
pub const DENSITY_WORDS: [&str; 4] = ["sparse", "gentle", "lively", "rapid"];
const REGISTERS: [(u8, u8); 4] = [(36, 47), (48, 59), (60, 71), (72, 83)];
const DENSITIES: [f64; 4] = [1.0, 2.0, 4.0, 6.0];

fn tags(words: &[&str]) -> Vec<TextElement> {
    words.iter().map(|w| TextElement::tag(*w)).collect()
}

/// Up to 16 mutually distinguishable 20 s tracks: register and note rate vary
/// jointly, audio is rendered from the MIDI, and each track has two tags no
/// other track uses.
pub fn overfit_corpus(n: usize, seed: u64) -> Vec<SynthTrack> {
    assert!(n <= COLORS.len(), "at most {} overfit tracks", COLORS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (lo, hi) = REGISTERS[i % 4];
            let notes = pattern(&mut rng, lo, hi, DENSITIES[i / 4 % 4], 20.0);
            SynthTrack {
                id: format!("ovf{i:02}"),
                audio_notes: notes.clone(),
                midi_notes: notes,
                timbre: Timbre::default(),
                texts: tags(&[COLORS[i], ANIMALS[i]]),
                source: Source::Strong,
                split: Some(Split::Train),
                duration_sec: 20.0,
            }
        })
        .collect()
}

pub const AUDIO_CLASS_WORDS: [&str; 8] = ["amber", "azure", "crimson", "ebony", "emerald", "golden", "indigo", "ivory"];
pub const MIDI_CLASS_WORDS: [&str; 8] = ["badger", "crane", "dolphin", "falcon", "gecko", "heron", "ibex", "jackal"];

/// 64 tracks, one per (audio class, MIDI class) pair. Every track of an
/// audio class has the same audio (timbre and note rate) and every track of a
/// MIDI class has the same MIDI (pitch band), so each modality alone narrows
/// a query to 8 tracks and only both together identify it. Texts name both
/// classes.
pub fn complementarity_corpus(seed: u64) -> Vec<SynthTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audio: Vec<(Vec<SynthNote>, Timbre)> = (0..8)
        .map(|a| {
            let timbre = Timbre {
                harmonics: if a % 2 == 0 {
                    vec![1.0, 0.1, 0.05]
                } else {
                    vec![1.0, 0.8, 0.7, 0.6, 0.5, 0.4]
                },
                decay_per_sec: 2.0,
            };
            (pattern(&mut rng, 48, 84, DENSITIES[a / 2], 20.0), timbre)
        })
        .collect();
    let midi: Vec<Vec<SynthNote>> = (0..8u8)
        .map(|m| pattern(&mut rng, 30 + 8 * m, 35 + 8 * m, 3.0, 20.0))
        .collect();
    let mut out = Vec::with_capacity(64);
    for (a, (audio_notes, timbre)) in audio.iter().enumerate() {
        for (m, midi_notes) in midi.iter().enumerate() {
            out.push(SynthTrack {
                id: format!("cmp{a}{m}"),
                midi_notes: midi_notes.clone(),
                audio_notes: audio_notes.clone(),
                timbre: timbre.clone(),
                texts: tags(&[AUDIO_CLASS_WORDS[a], MIDI_CLASS_WORDS[m]]),
                source: Source::Strong,
                split: Some(Split::Train),
                duration_sec: 20.0,
            });
        }
    }
    out
}

fn class_track<R: Rng + ?Sized>(rng: &mut R, id: String, class: usize, duration_sec: f64) -> SynthTrack {
    let (lo, hi) = REGISTERS[class % 4];
    let notes = pattern(rng, lo, hi, DENSITIES[class / 4], duration_sec);
    SynthTrack {
        id,
        audio_notes: notes.clone(),
        midi_notes: notes,
        timbre: Timbre::default(),
        texts: Vec::new(),
        source: Source::Strong,
        split: None,
        duration_sec,
    }
}

/// Weak and strong sources over 16 register/rate classes, plus an
/// out-of-domain set described by differently phrased captions.
///
/// Strong texts are accurate tags plus a caption. Weak texts are tags where
/// each word is replaced by a random one with probability 0.3, plus a generic
/// tag. Splits are left unassigned.
pub fn multi_source_corpus(n_weak: usize, n_strong: usize, n_ood: usize, seed: u64) -> (Vec<SynthTrack>, Vec<SynthTrack>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut main = Vec::with_capacity(n_weak + n_strong);
    for i in 0..n_weak + n_strong {
        let class = rng.gen_range(0..16);
        let duration = rng.gen_range(20.0..30.0f64).round();
        let (mut t, r, d) = if i < n_weak {
            (class_track(&mut rng, format!("weak{i:03}"), class, duration), class % 4, class / 4)
        } else {
            (class_track(&mut rng, format!("strong{:03}", i - n_weak), class, duration), class % 4, class / 4)
        };
        if i < n_weak {
            t.source = Source::Weak;
            let noisy = |rng: &mut ChaCha8Rng, words: &[&'static str; 4], k: usize| {
                if rng.gen_bool(0.3) {
                    *words.choose(rng).unwrap()
                } else {
                    words[k]
                }
            };
            let rw = noisy(&mut rng, &REGISTER_WORDS, r);
            let dw = noisy(&mut rng, &DENSITY_WORDS, d);
            t.texts = tags(&[rw, dw, "piano"]);
        } else {
            t.texts = tags(&[REGISTER_WORDS[r], DENSITY_WORDS[d]]);
            t.texts.push(TextElement::caption(format!(
                "a {} piano piece in a {} register",
                DENSITY_WORDS[d], REGISTER_WORDS[r]
            )));
        }
        main.push(t);
    }
    let ood = (0..n_ood)
        .map(|i| {
            let class = rng.gen_range(0..16);
            let mut t = class_track(&mut rng, format!("ood{i:03}"), class, 20.0);
            t.texts = vec![TextElement::caption(format!(
                "{} playing that stays {}",
                DENSITY_WORDS[class / 4],
                REGISTER_WORDS[class % 4]
            ))];
            t.split = Some(Split::Test);
            t
        })
        .collect();
    (main, ood)
}

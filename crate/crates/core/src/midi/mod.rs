//! Standard MIDI File decoding, bar grids and compound-word tokens.

mod cp;

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use crate::error::{Error, Result};

pub use cp::{
    align_segment, detokenize, tokenize_cp, tokenize_segment, BarFlag, EndCondition, CpNote, CpToken, TokenSequence, BAR_VOCAB,
    DURATION_VOCAB, MAX_DURATION, PITCH_VOCAB, POSITIONS_PER_BAR, POSITION_VOCAB, SEQUENCE_LEN,
};

pub const DEFAULT_BPM: f64 = 120.0;
const DEFAULT_US_PER_QUARTER: u32 = 500_000;

/// One sounding note. Beats are quarter notes.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteEvent {
    pub onset_sec: f64,
    pub onset_beats: f64,
    pub pitch: u8,
    pub duration_beats: f64,
    pub velocity: u8,
}

/// Bar onsets in seconds plus the (single) meter of the piece.
#[derive(Debug, Clone, PartialEq)]
pub struct BarGrid {
    pub bar_onsets_sec: Vec<f64>,
    pub beats_per_bar: u32,
    /// Time-signature denominator; 4 means the beat is a quarter note.
    pub beat_unit: u32,
}

impl BarGrid {
    /// Uniform grid of `bars` bars, each `bar_sec` long, in 4/4.
    pub fn uniform(bars: usize, bar_sec: f64) -> Self {
        Self {
            bar_onsets_sec: (0..bars.max(1)).map(|i| i as f64 * bar_sec).collect(),
            beats_per_bar: 4,
            beat_unit: 4,
        }
    }

    pub fn quarters_per_bar(&self) -> f64 {
        self.beats_per_bar as f64 * 4.0 / self.beat_unit as f64
    }

    pub fn len(&self) -> usize {
        self.bar_onsets_sec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bar_onsets_sec.is_empty()
    }

    /// Index of the bar containing a beat position.
    pub fn bar_of_beat(&self, beats: f64) -> usize {
        (beats / self.quarters_per_bar() + 1e-9).floor().max(0.0) as usize
    }

    fn bar_length_sec(&self, bar: usize) -> f64 {
        let n = self.bar_onsets_sec.len();
        if bar + 1 < n {
            self.bar_onsets_sec[bar + 1] - self.bar_onsets_sec[bar]
        } else if n >= 2 {
            self.bar_onsets_sec[n - 1] - self.bar_onsets_sec[n - 2]
        } else {
            self.quarters_per_bar() * 60.0 / DEFAULT_BPM
        }
    }

    fn bar_onset(&self, bar: usize) -> f64 {
        match self.bar_onsets_sec.get(bar) {
            Some(&t) => t,
            None => {
                let last = self.bar_onsets_sec.len().saturating_sub(1);
                let base = self.bar_onsets_sec.get(last).copied().unwrap_or(0.0);
                base + (bar - last) as f64 * self.bar_length_sec(last)
            }
        }
    }

    /// Seconds for a beat position, linear within each bar.
    pub fn beats_to_sec(&self, beats: f64) -> f64 {
        let qpb = self.quarters_per_bar();
        let bar = self.bar_of_beat(beats);
        let frac = (beats - bar as f64 * qpb) / qpb;
        self.bar_onset(bar) + frac * self.bar_length_sec(bar)
    }
}

/// Converts ticks to seconds through a tempo map.
struct TempoMap {
    /// (tick, seconds at tick, microseconds per quarter from tick on)
    segments: Vec<(u64, f64, u32)>,
    ticks_per_quarter: f64,
    /// Set for SMPTE timing, where ticks are a fixed fraction of a second.
    ticks_per_second: Option<f64>,
}

impl TempoMap {
    fn new(timing: Timing, mut changes: Vec<(u64, u32)>) -> Self {
        match timing {
            Timing::Metrical(tpq) => {
                changes.sort_by_key(|c| c.0);
                let mut segments: Vec<(u64, f64, u32)> = vec![(0, 0.0, DEFAULT_US_PER_QUARTER)];
                let tpq = tpq.as_int().max(1) as f64;
                for (tick, us) in changes {
                    let &(t0, s0, us0) = segments.last().unwrap();
                    let sec = s0 + (tick - t0) as f64 / tpq * us0 as f64 * 1e-6;
                    if tick == t0 {
                        segments.pop();
                    }
                    segments.push((tick, sec, us));
                }
                Self {
                    segments,
                    ticks_per_quarter: tpq,
                    ticks_per_second: None,
                }
            }
            Timing::Timecode(fps, sub) => {
                let tps = fps.as_f32() as f64 * sub.max(1) as f64;
                Self {
                    segments: vec![(0, 0.0, DEFAULT_US_PER_QUARTER)],
                    // beats assume the default tempo under SMPTE timing
                    ticks_per_quarter: tps * 60.0 / DEFAULT_BPM,
                    ticks_per_second: Some(tps),
                }
            }
        }
    }

    fn seconds(&self, tick: u64) -> f64 {
        if let Some(tps) = self.ticks_per_second {
            return tick as f64 / tps;
        }
        let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (t0, s0, us) = self.segments[idx];
        s0 + (tick - t0) as f64 / self.ticks_per_quarter * us as f64 * 1e-6
    }

    fn beats(&self, tick: u64) -> f64 {
        tick as f64 / self.ticks_per_quarter
    }
}

/// Decodes a format 0/1 Standard MIDI File into sorted notes and a bar grid.
pub fn parse_midi(uri: impl AsRef<Path>) -> Result<(Vec<NoteEvent>, BarGrid)> {
    let path = uri.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    parse_midi_bytes(&bytes)
}

pub fn parse_midi_bytes(bytes: &[u8]) -> Result<(Vec<NoteEvent>, BarGrid)> {
    let smf = Smf::parse(bytes).map_err(|e| Error::MidiDecode(e.to_string()))?;
    if smf.header.format == Format::Sequential {
        return Err(Error::MidiDecode("format 2 files are not supported".into()));
    }

    let mut tempo_changes = Vec::new();
    let mut time_sig: Option<(u64, u32, u32)> = None;
    // (tick, channel, key, velocity or None for note-off)
    let mut note_events: Vec<(u64, u8, u8, Option<u8>)> = Vec::new();
    let mut last_tick = 0u64;

    for track in &smf.tracks {
        let mut tick = 0u64;
        for ev in track {
            tick += ev.delta.as_int() as u64;
            last_tick = last_tick.max(tick);
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(us)) => {
                    tempo_changes.push((tick, us.as_int().max(1)))
                }
                TrackEventKind::Meta(MetaMessage::TimeSignature(num, den_pow, _, _)) => {
                    if time_sig.is_none_or(|(t, _, _)| tick < t) {
                        time_sig = Some((tick, num.max(1) as u32, 1u32 << den_pow.min(6)));
                    }
                }
                TrackEventKind::Midi { channel, message } => match message {
                    MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                        note_events.push((tick, channel.as_int(), key.as_int(), Some(vel.as_int())))
                    }
                    MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                        note_events.push((tick, channel.as_int(), key.as_int(), None))
                    }
                    _ => {}
                },
                _ => {}
            }
        }
    }
    // offs before ons at the same tick so re-struck notes pair correctly
    note_events.sort_by_key(|e| (e.0, e.3.is_some()));

    let tempo = TempoMap::new(smf.header.timing, tempo_changes);
    let mut active: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut spans: Vec<(u64, u64, u8, u8)> = Vec::new();
    for (tick, ch, key, vel) in note_events {
        match vel {
            Some(v) => active.entry((ch, key)).or_default().push_back((tick, v)),
            None => match active.get_mut(&(ch, key)).and_then(VecDeque::pop_front) {
                Some((on, v)) => spans.push((on, tick, key, v)),
                None => log::warn!("unmatched note-off for key {key} on channel {ch} at tick {tick}; dropped"),
            },
        }
    }
    for ((ch, key), pending) in active {
        for (on, v) in pending {
            log::warn!("note {key} on channel {ch} never released; closing at end of track");
            spans.push((on, last_tick, key, v));
        }
    }

    let mut notes: Vec<NoteEvent> = spans
        .into_iter()
        .filter(|(on, off, _, _)| off > on)
        .map(|(on, off, key, vel)| NoteEvent {
            onset_sec: tempo.seconds(on),
            onset_beats: tempo.beats(on),
            pitch: key,
            duration_beats: tempo.beats(off) - tempo.beats(on),
            velocity: vel,
        })
        .collect();
    notes.sort_by(|a, b| {
        a.onset_beats
            .total_cmp(&b.onset_beats)
            .then(a.pitch.cmp(&b.pitch))
    });

    let (beats_per_bar, beat_unit) = time_sig.map(|(_, n, d)| (n, d)).unwrap_or((4, 4));
    let qpb = beats_per_bar as f64 * 4.0 / beat_unit as f64;
    let end_beats = notes
        .iter()
        .map(|n| n.onset_beats + n.duration_beats)
        .fold(tempo.beats(last_tick), f64::max);
    let bars = ((end_beats / qpb).ceil() as usize).max(1);
    let bar_onsets_sec = (0..bars)
        .map(|b| {
            let tick = (b as f64 * qpb * tempo.ticks_per_quarter).round() as u64;
            tempo.seconds(tick)
        })
        .collect();
    Ok((
        notes,
        BarGrid {
            bar_onsets_sec,
            beats_per_bar,
            beat_unit,
        },
    ))
}

/// Layout used when writing MIDI files.
#[derive(Debug, Clone)]
pub struct MidiLayout {
    pub ticks_per_quarter: u16,
    /// (beat, bpm) tempo changes; beat 0 sets the initial tempo.
    pub tempos: Vec<(f64, f64)>,
    pub beats_per_bar: u8,
    pub beat_unit: u8,
}

impl Default for MidiLayout {
    fn default() -> Self {
        Self {
            ticks_per_quarter: 480,
            tempos: vec![(0.0, DEFAULT_BPM)],
            beats_per_bar: 4,
            beat_unit: 4,
        }
    }
}

/// Writes notes (positioned by `onset_beats`) as a single-track SMF.
pub fn write_midi(path: impl AsRef<Path>, notes: &[NoteEvent], layout: &MidiLayout) -> Result<()> {
    let tpq = layout.ticks_per_quarter as f64;
    let to_tick = |beats: f64| (beats * tpq).round().max(0.0) as u64;
    // (tick, order, kind); order puts meta first, then offs, then ons
    let mut events: Vec<(u64, u8, TrackEventKind<'static>)> = Vec::new();
    events.push((
        0,
        0,
        TrackEventKind::Meta(MetaMessage::TimeSignature(
            layout.beats_per_bar,
            layout.beat_unit.trailing_zeros() as u8,
            24,
            8,
        )),
    ));
    for &(beat, bpm) in &layout.tempos {
        let us = (60_000_000.0 / bpm).round() as u32;
        events.push((to_tick(beat), 0, TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us)))));
    }
    for n in notes {
        let on = to_tick(n.onset_beats);
        let off = to_tick(n.onset_beats + n.duration_beats).max(on + 1);
        let key = u7::new(n.pitch.min(127));
        events.push((
            on,
            2,
            TrackEventKind::Midi {
                channel: u4::new(0),
                message: MidiMessage::NoteOn {
                    key,
                    vel: u7::new(n.velocity.clamp(1, 127)),
                },
            },
        ));
        events.push((
            off,
            1,
            TrackEventKind::Midi {
                channel: u4::new(0),
                message: MidiMessage::NoteOff {
                    key,
                    vel: u7::new(0),
                },
            },
        ));
    }
    events.sort_by_key(|e| (e.0, e.1));
    let mut track: Vec<TrackEvent> = Vec::with_capacity(events.len() + 1);
    let mut prev = 0u64;
    for (tick, _, kind) in events {
        track.push(TrackEvent {
            delta: u28::new((tick - prev) as u32),
            kind,
        });
        prev = tick;
    }
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });
    let mut smf = Smf::new(Header::new(
        Format::SingleTrack,
        Timing::Metrical(u15::new(layout.ticks_per_quarter)),
    ));
    smf.tracks.push(track);
    smf.save(path)?;
    Ok(())
}

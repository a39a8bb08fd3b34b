use serde::{Deserialize, Serialize};

use super::{BarGrid, NoteEvent};

pub const SEQUENCE_LEN: usize = 512;
pub const POSITIONS_PER_BAR: u8 = 16;
pub const MAX_DURATION: u8 = 64;
/// Thirty-second notes per quarter-note beat.
const DURATION_UNITS_PER_BEAT: f64 = 8.0;

/// Embedding-table sizes per field; the last id of each table is PAD.
pub const BAR_VOCAB: usize = 3;
pub const POSITION_VOCAB: usize = POSITIONS_PER_BAR as usize + 1;
pub const PITCH_VOCAB: usize = 129;
pub const DURATION_VOCAB: usize = MAX_DURATION as usize + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BarFlag {
    New,
    Cont,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CpNote {
    pub bar: BarFlag,
    /// Sixteenth of the bar, 0..16.
    pub position: u8,
    pub pitch: u8,
    /// Thirty-second notes, 1..=64.
    pub duration: u8,
}

/// Compound-word token. PAD is all-or-nothing across fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CpToken {
    Note(CpNote),
    Pad,
}

impl CpToken {
    pub fn is_pad(&self) -> bool {
        matches!(self, CpToken::Pad)
    }

    /// Per-field embedding ids `[bar, position, pitch, duration]`.
    pub fn field_ids(&self) -> [u32; 4] {
        match self {
            CpToken::Pad => [
                BAR_VOCAB as u32 - 1,
                POSITION_VOCAB as u32 - 1,
                PITCH_VOCAB as u32 - 1,
                DURATION_VOCAB as u32 - 1,
            ],
            CpToken::Note(n) => [
                match n.bar {
                    BarFlag::New => 0,
                    BarFlag::Cont => 1,
                },
                n.position as u32,
                n.pitch as u32,
                n.duration as u32 - 1,
            ],
        }
    }
}

/// Exactly 512 tokens with PAD as a suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<CpToken>,
}

impl TokenSequence {
    /// Pads or truncates `notes` to 512 tokens.
    pub fn from_notes(mut notes: Vec<CpNote>) -> Self {
        notes.truncate(SEQUENCE_LEN);
        let mut tokens: Vec<CpToken> = notes.into_iter().map(CpToken::Note).collect();
        tokens.resize(SEQUENCE_LEN, CpToken::Pad);
        Self { tokens }
    }

    pub fn empty() -> Self {
        Self::from_notes(Vec::new())
    }

    pub fn tokens(&self) -> &[CpToken] {
        &self.tokens
    }

    /// True where the token is PAD.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(CpToken::is_pad).collect()
    }

    /// Number of non-PAD tokens.
    pub fn len_notes(&self) -> usize {
        self.tokens.iter().take_while(|t| !t.is_pad()).count()
    }

    pub fn notes(&self) -> impl Iterator<Item = &CpNote> {
        self.tokens.iter().filter_map(|t| match t {
            CpToken::Note(n) => Some(n),
            CpToken::Pad => None,
        })
    }
}

/// Which bars a token window covers after `start_bar`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EndCondition {
    /// Up to the last grid bar whose onset precedes this time.
    Seconds(f64),
    /// Up to and including this bar.
    Bar(usize),
}

/// Nearest bar onset to `audio_start_sec`; ties go to the earlier bar.
pub fn align_segment(audio_start_sec: f64, grid: &BarGrid) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, &onset) in grid.bar_onsets_sec.iter().enumerate() {
        let d = (onset - audio_start_sec).abs();
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    best
}

fn end_bar(grid: &BarGrid, start_bar: usize, end: EndCondition) -> Option<usize> {
    let last = match end {
        EndCondition::Bar(b) => b,
        EndCondition::Seconds(t) => grid.bar_onsets_sec.iter().rposition(|&o| o < t)?,
    };
    (last >= start_bar).then_some(last)
}

/// Tokenizes notes with onsets in bars `start_bar..=end` into a 512-token sequence.
pub fn tokenize_cp(
    notes: &[NoteEvent],
    grid: &BarGrid,
    start_bar: usize,
    end: EndCondition,
) -> TokenSequence {
    let Some(last_bar) = end_bar(grid, start_bar, end) else {
        return TokenSequence::empty();
    };
    let qpb = grid.quarters_per_bar();
    let mut out = Vec::new();
    let mut current_bar = None;
    for n in notes {
        let bar = grid.bar_of_beat(n.onset_beats);
        if bar < start_bar || bar > last_bar {
            continue;
        }
        let offset = (n.onset_beats - bar as f64 * qpb) / qpb;
        let position = ((offset * POSITIONS_PER_BAR as f64 + 1e-9).floor() as i64)
            .clamp(0, POSITIONS_PER_BAR as i64 - 1) as u8;
        let duration = (n.duration_beats * DURATION_UNITS_PER_BEAT)
            .round()
            .clamp(1.0, MAX_DURATION as f64) as u8;
        let flag = if current_bar == Some(bar) {
            BarFlag::Cont
        } else {
            current_bar = Some(bar);
            BarFlag::New
        };
        out.push(CpNote {
            bar: flag,
            position,
            pitch: n.pitch.min(127),
            duration,
        });
        if out.len() == SEQUENCE_LEN {
            break;
        }
    }
    TokenSequence::from_notes(out)
}

/// Aligns an audio window to the grid and tokenizes the matching bars.
pub fn tokenize_segment(
    notes: &[NoteEvent],
    grid: &BarGrid,
    audio_start_sec: f64,
    length_sec: f64,
) -> TokenSequence {
    let start_bar = align_segment(audio_start_sec, grid);
    tokenize_cp(
        notes,
        grid,
        start_bar,
        EndCondition::Seconds(audio_start_sec + length_sec),
    )
}

/// Places tokens back on the grid. Each NEW after the first advances one bar.
pub fn detokenize(sequence: &TokenSequence, grid: &BarGrid, start_bar: usize) -> Vec<NoteEvent> {
    let qpb = grid.quarters_per_bar();
    let mut bar: Option<usize> = None;
    let mut out = Vec::new();
    for n in sequence.notes() {
        let b = match (n.bar, bar) {
            (BarFlag::New, Some(b)) => b + 1,
            (_, Some(b)) => b,
            (_, None) => start_bar,
        };
        bar = Some(b);
        let onset_beats = b as f64 * qpb + n.position as f64 / POSITIONS_PER_BAR as f64 * qpb;
        out.push(NoteEvent {
            onset_sec: grid.beats_to_sec(onset_beats),
            onset_beats,
            pitch: n.pitch,
            duration_beats: n.duration as f64 / DURATION_UNITS_PER_BEAT,
            velocity: 64,
        });
    }
    out
}

//! Training-text composition and a small subword tokenizer.
//!
//! The tokenizer learns a merge-based vocabulary from the corpus texts and
//! segments input by greedy longest match inside each whitespace-separated
//! word. Word-internal continuation pieces carry a `##` prefix.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_TEXT_TOKENS: usize = 77;
pub const MAX_CONTENT_TOKENS: usize = MAX_TEXT_TOKENS - 2;
pub const ELEMENT_SEPARATOR: &str = ", ";
pub const DEFAULT_KEEP_PROB: f64 = 0.5;

pub const PAD_ID: u32 = 0;
pub const BEGIN_ID: u32 = 1;
pub const END_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const CONTINUATION: &str = "##";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Tag,
    Caption,
}

impl TextKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tag" => Some(Self::Tag),
            "caption" => Some(Self::Caption),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tag => "tag",
            Self::Caption => "caption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextElement {
    pub kind: TextKind,
    pub content: String,
}

impl TextElement {
    pub fn tag(content: impl Into<String>) -> Self {
        Self {
            kind: TextKind::Tag,
            content: content.into(),
        }
    }

    pub fn caption(content: impl Into<String>) -> Self {
        Self {
            kind: TextKind::Caption,
            content: content.into(),
        }
    }
}

pub fn join_elements<'a>(elements: impl Iterator<Item = &'a TextElement>) -> String {
    elements
        .map(|e| e.content.trim())
        .collect::<Vec<_>>()
        .join(ELEMENT_SEPARATOR)
}

/// Randomly keeps a subset of the elements (at least one) in a random order.
pub fn compose_with_dropout<R: Rng + ?Sized>(
    elements: &[TextElement],
    rng: &mut R,
    keep_prob: f64,
) -> Result<String> {
    if elements.is_empty() {
        return Err(Error::EmptyElements);
    }
    let keep_prob = keep_prob.clamp(0.0, 1.0);
    let mut kept: Vec<&TextElement> = elements.iter().filter(|_| rng.gen_bool(keep_prob)).collect();
    if kept.is_empty() {
        kept.push(&elements[rng.gen_range(0..elements.len())]);
    }
    kept.shuffle(rng);
    Ok(join_elements(kept.into_iter()))
}

/// Token ids of one text, framed by begin/end markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokenIds {
    pub ids: Vec<u32>,
}

impl TextTokenIds {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let max_piece_chars = tokens
            .iter()
            .skip(RESERVED.len())
            .map(|t| t.trim_start_matches(CONTINUATION).chars().count())
            .max()
            .unwrap_or(0);
        Self {
            tokens,
            index,
            max_piece_chars,
        }
    }

    /// Builds a vocabulary from explicit pieces (reserved tokens are prepended).
    pub fn from_pieces<S: AsRef<str>>(pieces: &[S]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for p in pieces {
            if !tokens.iter().any(|t| t == p.as_ref()) {
                tokens.push(p.as_ref().to_string());
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}").unwrap();
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut entries: BTreeMap<u32, String> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line {}: expected token<TAB>id", n + 1)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Format(format!("vocab line {}: bad id `{id}`", n + 1)))?;
            if entries.insert(id, tok.to_string()).is_some() {
                return Err(Error::Format(format!("vocab id {id} appears twice")));
            }
        }
        if entries.keys().enumerate().any(|(i, id)| i as u32 != *id) {
            return Err(Error::Format("vocab ids must be contiguous from 0".into()));
        }
        if entries.len() < RESERVED.len() {
            return Err(Error::Format("vocab is missing reserved tokens".into()));
        }
        Ok(Self::from_tokens(entries.into_values().collect()))
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

fn merge_symbols(a: &str, b: &str) -> String {
    format!("{a}{}", b.trim_start_matches(CONTINUATION))
}

/// Learns a merge-based subword vocabulary with at most `size` entries,
/// counting the four reserved tokens.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], size: usize) -> Vocab {
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| (word_symbols(w), f))
        .collect();

    let mut alphabet: BTreeMap<&str, usize> = BTreeMap::new();
    for (syms, f) in &words {
        for s in syms {
            *alphabet.entry(s.as_str()).or_default() += f;
        }
    }
    let mut alphabet: Vec<(&str, usize)> = alphabet.into_iter().collect();
    alphabet.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    for (s, _) in alphabet {
        if tokens.len() >= size {
            break;
        }
        tokens.push(s.to_string());
    }
    let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < size {
        let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *pairs.entry((pair[0].clone(), pair[1].clone())).or_default() += f;
            }
        }
        // most frequent pair; BTreeMap order breaks ties deterministically
        let best = pairs
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some(((a, b), _)) = best else { break };
        let merged = merge_symbols(&a, &b);
        for (syms, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens)
}

fn encode_word(word: &str, vocab: &Vocab, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    let mut i = 0;
    let mut last_unknown = false;
    while i < chars.len() {
        let max_len = vocab.max_piece_chars.min(chars.len() - i);
        let mut matched = None;
        for len in (1..=max_len).rev() {
            let piece: String = chars[i..i + len].iter().collect();
            let key = if i == 0 {
                piece
            } else {
                format!("{CONTINUATION}{piece}")
            };
            if let Some(id) = vocab.id(&key) {
                matched = Some((id, len));
                break;
            }
        }
        match matched {
            Some((id, len)) => {
                out.push(id);
                i += len;
                last_unknown = false;
            }
            None => {
                if !last_unknown {
                    out.push(UNK_ID);
                }
                last_unknown = true;
                i += 1;
            }
        }
    }
}

/// Segments `text` and frames it as `[BEGIN, ..., END]`, at most 77 ids.
pub fn tokenize_text(text: &str, vocab: &Vocab) -> TextTokenIds {
    let mut content = Vec::new();
    for word in text.split_whitespace() {
        encode_word(word, vocab, &mut content);
        if content.len() >= MAX_CONTENT_TOKENS {
            break;
        }
    }
    content.truncate(MAX_CONTENT_TOKENS);
    let mut ids = Vec::with_capacity(content.len() + 2);
    ids.push(BEGIN_ID);
    ids.extend(content);
    ids.push(END_ID);
    TextTokenIds { ids }
}

/// Inverse of [`tokenize_text`] for texts covered by the vocabulary:
/// words are rejoined with single spaces.
pub fn decode_text(ids: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == PAD_ID || id == BEGIN_ID || id == END_ID {
            continue;
        }
        let piece = vocab.token(id).unwrap_or(RESERVED[UNK_ID as usize]);
        match piece.strip_prefix(CONTINUATION) {
            Some(rest) if id != UNK_ID => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_element_always_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let els = [TextElement::tag("nocturne")];
        for _ in 0..100 {
            assert_eq!(compose_with_dropout(&els, &mut rng, 0.5).unwrap(), "nocturne");
        }
    }

    #[test]
    fn keep_all_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let els = [
            TextElement::tag("calm"),
            TextElement::tag("jazz"),
            TextElement::caption("a slow ballad"),
        ];
        for _ in 0..50 {
            let s = compose_with_dropout(&els, &mut rng, 1.0).unwrap();
            let mut parts: Vec<_> = s.split(ELEMENT_SEPARATOR).collect();
            parts.sort();
            assert_eq!(parts, ["a slow ballad", "calm", "jazz"]);
        }
    }

    #[test]
    fn empty_elements_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            compose_with_dropout(&[], &mut rng, 0.5),
            Err(Error::EmptyElements)
        ));
    }

    #[test]
    fn inclusion_rate_matches_rescue_rule() {
        // Enumerating the four keep/drop patterns: P(kept) = 0.5, plus the
        // all-dropped pattern (0.25) rescues each element half the time.
        let expected = 0.5 + 0.25 * 0.5;
        let els = [TextElement::tag("alpha"), TextElement::tag("beta")];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut hits = 0;
        for _ in 0..n {
            let s = compose_with_dropout(&els, &mut rng, 0.5).unwrap();
            if s.split(ELEMENT_SEPARATOR).any(|p| p == "alpha") {
                hits += 1;
            }
        }
        let frac = hits as f64 / n as f64;
        let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((frac - expected).abs() < 5.0 * sigma, "{frac}");
    }

    #[test]
    fn empty_text_is_framed() {
        let v = build_vocab(&["calm piano"], 50);
        assert_eq!(tokenize_text("", &v).ids, vec![BEGIN_ID, END_ID]);
    }

    #[test]
    fn long_text_truncated_to_limit() {
        let v = build_vocab(&["word"], 50);
        let text = vec!["word"; 500].join(" ");
        let t = tokenize_text(&text, &v);
        assert_eq!(t.len(), MAX_TEXT_TOKENS);
        assert_eq!(t.ids[0], BEGIN_ID);
        assert_eq!(*t.ids.last().unwrap(), END_ID);
    }

    #[test]
    fn fixture_vocab_segments_whole_words() {
        let v = Vocab::from_pieces(&["jazz", "piano"]);
        let t = tokenize_text("jazz piano", &v);
        assert_eq!(
            t.ids,
            vec![BEGIN_ID, v.id("jazz").unwrap(), v.id("piano").unwrap(), END_ID]
        );
    }

    #[test]
    fn unknown_span_collapses_to_one_unk() {
        let v = Vocab::from_pieces(&["a"]);
        assert_eq!(tokenize_text("xyz", &v).ids, vec![BEGIN_ID, UNK_ID, END_ID]);
    }

    #[test]
    fn reserved_only_at_size_four() {
        let v = build_vocab(&["aa aa"], 4);
        assert_eq!(v.len(), 4);
        assert!(v.is_empty());
    }

    #[test]
    fn one_merge_produces_aa() {
        let v = build_vocab(&["aa aa"], 10);
        assert!(v.contains("aa"));
        assert!(v.len() <= 10);
    }

    #[test]
    fn vocab_is_deterministic() {
        let corpus = ["slow romantic ballad", "fast virtuosic etude", "romantic nocturne"];
        assert_eq!(build_vocab(&corpus, 40), build_vocab(&corpus, 40));
    }

    #[test]
    fn decode_inverts_covered_text() {
        let corpus = ["calm, jazz piano", "bright classical waltz"];
        let v = build_vocab(&corpus, 200);
        for text in corpus {
            assert_eq!(decode_text(&tokenize_text(text, &v).ids, &v), text);
        }
    }
}

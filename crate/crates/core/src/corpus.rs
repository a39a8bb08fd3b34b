//! Manifest-driven corpus handling: loading, splitting and multi-source sampling.
//!
//! A manifest is a UTF-8 file with one JSON object per line. An optional first
//! line `{"schema_version": N}` carries the format version; every other line is
//! a track record:
//!
//! ```text
//! {"id": "t1", "audio": "a/t1.wav", "midi": "m/t1.mid",
//!  "texts": [{"kind": "tag", "content": "calm"}], "source": "strong",
//!  "split": "train", "duration_sec": 31.2}
//! ```
//!
//! Relative media paths are resolved against `TRIBIND_DATA_ROOT` when set, and
//! against the manifest's directory otherwise.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, ManifestViolation, Result};
use crate::text::{TextElement, TextKind};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_ROOT_ENV: &str = "TRIBIND_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    const ORDER: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Weak => "weak",
            Self::Strong => "strong",
        }
    }
}

/// One corpus item. All three modalities are required.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub id: String,
    pub audio_uri: PathBuf,
    pub midi_uri: PathBuf,
    pub texts: Vec<TextElement>,
    pub source: Source,
    pub split: Option<Split>,
    pub duration_sec: f64,
}

impl TrackRecord {
    /// Deterministic evaluation text: every element, in manifest order.
    pub fn full_text(&self) -> String {
        crate::text::join_elements(self.texts.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<TrackRecord>,
    pub schema_version: u32,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            schema_version: SCHEMA_VERSION,
        }
    }
}

impl DatasetManifest {
    pub fn new(records: Vec<TrackRecord>) -> Self {
        Self {
            records,
            schema_version: SCHEMA_VERSION,
        }
    }

    pub fn get(&self, id: &str) -> Option<&TrackRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records matching both a source and a split.
    pub fn select(&self, source: Source, split: Split) -> Vec<TrackRecord> {
        self.records
            .iter()
            .filter(|r| r.source == source && r.split == Some(split))
            .cloned()
            .collect()
    }

    pub fn by_split(&self, split: Split) -> Vec<TrackRecord> {
        self.records
            .iter()
            .filter(|r| r.split == Some(split))
            .cloned()
            .collect()
    }
}

/// Relative sampling weights for the two sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weak_weight: f64,
    pub strong_weight: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            weak_weight: 7.0,
            strong_weight: 3.0,
        }
    }
}

impl MixtureSpec {
    pub fn new(weak_weight: f64, strong_weight: f64) -> Result<Self> {
        let m = Self {
            weak_weight,
            strong_weight,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.weak_weight) || !ok(self.strong_weight) {
            return Err(Error::Config(
                "mixture weights must be finite and non-negative".into(),
            ));
        }
        if self.weak_weight + self.strong_weight <= 0.0 {
            return Err(Error::Config("mixture weights are both zero".into()));
        }
        Ok(())
    }

    pub fn weak_probability(&self) -> f64 {
        self.weak_weight / (self.weak_weight + self.strong_weight)
    }
}

fn data_root(manifest_path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    }
}

fn resolve(root: &Path, uri: &str) -> PathBuf {
    let p = PathBuf::from(uri);
    if p.is_absolute() {
        p
    } else {
        root.join(p)
    }
}

struct LineParser<'a> {
    line: usize,
    obj: &'a Map<String, Value>,
    violations: &'a mut Vec<ManifestViolation>,
}

impl LineParser<'_> {
    fn fail(&mut self, field: &str, reason: impl Into<String>) {
        self.violations.push(ManifestViolation::Schema {
            line: self.line,
            field: field.to_string(),
            reason: reason.into(),
        });
    }

    fn string(&mut self, field: &str) -> Option<String> {
        match self.obj.get(field) {
            Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
            Some(Value::String(_)) => {
                self.fail(field, "must not be empty");
                None
            }
            Some(_) => {
                self.fail(field, "expected a string");
                None
            }
            None => {
                self.fail(field, "missing");
                None
            }
        }
    }

    fn texts(&mut self) -> Option<Vec<TextElement>> {
        let Some(Value::Array(items)) = self.obj.get("texts") else {
            self.fail("texts", "expected an array of {kind, content}");
            return None;
        };
        if items.is_empty() {
            self.fail("texts", "must contain at least one element");
            return None;
        }
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let field = format!("texts[{i}]");
            let kind = item
                .get("kind")
                .and_then(Value::as_str)
                .and_then(TextKind::parse);
            let content = item.get("content").and_then(Value::as_str);
            match (kind, content) {
                (Some(kind), Some(c)) if !c.trim().is_empty() => out.push(TextElement {
                    kind,
                    content: c.to_string(),
                }),
                (None, _) => self.fail(&format!("{field}.kind"), "expected \"tag\" or \"caption\""),
                _ => self.fail(&format!("{field}.content"), "must be a non-empty string"),
            }
        }
        (out.len() == items.len()).then_some(out)
    }

    fn source(&mut self) -> Option<Source> {
        match self.obj.get("source").and_then(Value::as_str) {
            Some("weak") => Some(Source::Weak),
            Some("strong") => Some(Source::Strong),
            _ => {
                self.fail("source", "expected \"weak\" or \"strong\"");
                None
            }
        }
    }

    fn split(&mut self) -> Option<Option<Split>> {
        match self.obj.get("split") {
            None | Some(Value::Null) => Some(None),
            Some(Value::String(s)) => match Split::parse(s) {
                Some(sp) => Some(Some(sp)),
                None => {
                    self.fail("split", "expected \"train\", \"val\" or \"test\"");
                    None
                }
            },
            Some(_) => {
                self.fail("split", "expected a string");
                None
            }
        }
    }

    fn duration(&mut self) -> Option<f64> {
        match self.obj.get("duration_sec").and_then(Value::as_f64) {
            Some(d) if d.is_finite() && d > 0.0 => Some(d),
            Some(_) => {
                self.fail("duration_sec", "must be a positive number");
                None
            }
            None => {
                self.fail("duration_sec", "missing or not a number");
                None
            }
        }
    }
}

/// Parses and validates a manifest. Every violation in the file is reported.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, &data_root(path))
}

pub(crate) fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest> {
    let mut violations = Vec::new();
    let mut records = Vec::new();
    let mut schema_version = SCHEMA_VERSION;
    let mut seen: HashSet<String> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(e) => {
                violations.push(ManifestViolation::Schema {
                    line,
                    field: "<line>".into(),
                    reason: format!("invalid JSON: {e}"),
                });
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            violations.push(ManifestViolation::Schema {
                line,
                field: "<line>".into(),
                reason: "expected a JSON object".into(),
            });
            continue;
        };
        if records.is_empty() && !obj.contains_key("id") {
            if let Some(v) = obj.get("schema_version").and_then(Value::as_u64) {
                schema_version = v as u32;
                continue;
            }
        }

        let mut p = LineParser {
            line,
            obj,
            violations: &mut violations,
        };
        let id = p.string("id");
        let audio = p.string("audio");
        let midi = p.string("midi");
        let texts = p.texts();
        let source = p.source();
        let split = p.split();
        let duration = p.duration();

        if let Some(id) = &id {
            if !seen.insert(id.clone()) {
                violations.push(ManifestViolation::DuplicateId {
                    line,
                    id: id.clone(),
                });
                continue;
            }
        }
        if let (Some(id), Some(audio), Some(midi), Some(texts), Some(source), Some(split), Some(d)) =
            (id, audio, midi, texts, source, split, duration)
        {
            records.push(TrackRecord {
                id,
                audio_uri: resolve(root, &audio),
                midi_uri: resolve(root, &midi),
                texts,
                source,
                split,
                duration_sec: d,
            });
        }
    }

    if violations.is_empty() {
        Ok(DatasetManifest {
            records,
            schema_version,
        })
    } else {
        Err(Error::Manifest(violations))
    }
}

fn record_json(r: &TrackRecord) -> Value {
    let texts: Vec<Value> = r
        .texts
        .iter()
        .map(|t| json!({"kind": t.kind.as_str(), "content": t.content}))
        .collect();
    let mut obj = json!({
        "id": r.id,
        "audio": r.audio_uri.to_string_lossy(),
        "midi": r.midi_uri.to_string_lossy(),
        "texts": texts,
        "source": r.source.as_str(),
        "duration_sec": r.duration_sec,
    });
    if let Some(split) = r.split {
        obj["split"] = Value::String(split.as_str().into());
    }
    obj
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(
        f,
        "{}",
        json!({ "schema_version": manifest.schema_version })
    )?;
    for r in &manifest.records {
        writeln!(f, "{}", record_json(r))?;
    }
    f.flush()?;
    Ok(())
}

fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.len() < 2 || ratios.len() > 3 {
        return Err(Error::Ratio(format!(
            "expected 2 (train/val) or 3 (train/val/test) ratios, got {}",
            ratios.len()
        )));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Ratio("ratios must be finite and non-negative".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Ratio(format!("ratios sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items over `ratios`.
/// Remainder ties go to the earlier split.
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Assigns every record to a split, stratified per source and deterministic in `seed`.
pub fn make_split(manifest: &DatasetManifest, ratios: &[f64], seed: u64) -> Result<DatasetManifest> {
    validate_ratios(ratios)?;
    if let Some(r) = manifest.records.iter().find(|r| r.split.is_some()) {
        return Err(Error::SplitAssigned(r.id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_source: BTreeMap<Source, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_source.entry(r.source).or_default().push(i);
    }

    let mut out = manifest.clone();
    for indices in by_source.values_mut() {
        indices.shuffle(&mut rng);
        let counts = apportion(indices.len(), ratios);
        let mut cursor = 0;
        for (split, count) in Split::ORDER.iter().zip(counts) {
            for &i in &indices[cursor..cursor + count] {
                out.records[i].split = Some(*split);
            }
            cursor += count;
        }
    }
    Ok(out)
}

/// Draws a batch where each slot independently picks a source with probability
/// proportional to its weight, then a uniform record from that source.
pub fn sample_mixed_batch<'a, R: Rng + ?Sized>(
    weak_pool: &'a [TrackRecord],
    strong_pool: &'a [TrackRecord],
    mixture: &MixtureSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a TrackRecord>> {
    mixture.validate()?;
    if mixture.weak_weight > 0.0 && weak_pool.is_empty() {
        return Err(Error::EmptyPool(Source::Weak));
    }
    if mixture.strong_weight > 0.0 && strong_pool.is_empty() {
        return Err(Error::EmptyPool(Source::Strong));
    }
    let p_weak = mixture.weak_probability();
    let batch = (0..batch_size)
        .map(|_| {
            let pool = if rng.gen_bool(p_weak) {
                weak_pool
            } else {
                strong_pool
            };
            &pool[rng.gen_range(0..pool.len())]
        })
        .collect();
    Ok(batch)
}

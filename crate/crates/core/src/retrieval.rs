//! Corpus embedding, fusion, ranking and recall metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TrackRecord;
use crate::data::DataCache;
use crate::encoders::{Modality, TriModel};
use crate::error::{Error, Result};
use crate::text::{tokenize_text, Vocab};

pub const STORE_MAGIC: &[u8; 4] = b"TBND";
pub const STORE_VERSION: u32 = 1;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Fused vectors shorter than this before renormalization are rejected.
const FUSION_MIN_NORM: f64 = 1e-6;
/// Segments embedded per forward pass.
const EMBED_CHUNK: usize = 16;

/// Row-major matrix of unit vectors with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub ids: Vec<String>,
    pub dim: usize,
    pub modality: Modality,
    pub model_digest: [u8; 32],
    matrix: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(
        ids: Vec<String>,
        matrix: Vec<f32>,
        dim: usize,
        modality: Modality,
        model_digest: [u8; 32],
    ) -> Result<Self> {
        if dim == 0 || matrix.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} ids of dimension {dim}",
                matrix.len(),
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::IdMismatch(format!("duplicate id `{id}`")));
            }
        }
        Ok(Self {
            ids,
            dim,
            modality,
            model_digest,
            matrix,
            index,
        })
    }

    /// Builds a store from (id, vector) pairs.
    pub fn from_rows(
        rows: Vec<(String, Vec<f32>)>,
        modality: Modality,
        model_digest: [u8; 32],
    ) -> Result<Self> {
        let dim = rows.first().map(|r| r.1.len()).unwrap_or(1);
        let mut ids = Vec::with_capacity(rows.len());
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::Shape(format!("`{id}` has dimension {}, expected {dim}", v.len())));
            }
            ids.push(id);
            matrix.extend(v);
        }
        Self::new(ids, matrix, dim, modality, model_digest)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    /// Writes `TBND | version | modality | dim | count | digest | f32 matrix | ids`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(64 + self.matrix.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.push(self.modality.code());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.model_digest);
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { buf: &bytes, pos: 0 };
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::Format(format!("{} is not an embedding store", path.display())));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let modality = Modality::from_code(r.take(1)?[0])
            .ok_or_else(|| Error::Format("unknown modality code".into()))?;
        let dim = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| Error::Format("count overflow".into()))?;
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32)?);
        let n = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("matrix size overflow".into()))?)?;
        let matrix = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
            ids.push(s.to_string());
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after id table".into()));
        }
        Self::new(ids, matrix, dim.max(1), modality, digest).map_err(|e| Error::Format(e.to_string()))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated embedding store".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn normalized_mean(rows: &[Vec<f32>]) -> Option<Vec<f32>> {
    let dim = rows.first()?.len();
    let mut acc = vec![0f64; dim];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < FUSION_MIN_NORM {
        return None;
    }
    Some(acc.iter().map(|v| (v / norm) as f32).collect())
}

/// A track that could not be embedded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTrack {
    pub id: String,
    pub reason: String,
}

/// Embeds every record: each track is cut into consecutive 20 s windows,
/// embedded per window, averaged and renormalized. Tracks whose files fail to
/// decode are skipped and reported. `Fused` averages the audio and symbolic
/// track embeddings.
pub fn embed_corpus(
    model: &TriModel,
    records: &[TrackRecord],
    modality: Modality,
    cache: &mut DataCache,
) -> Result<(EmbeddingStore, Vec<SkippedTrack>)> {
    match modality {
        Modality::Text => Err(Error::Config("use embed_texts for text queries".into())),
        Modality::Fused => {
            let (a, skipped) = embed_corpus(model, records, Modality::Audio, cache)?;
            let (s, _) = embed_corpus(model, records, Modality::Symbolic, cache)?;
            Ok((fuse(&a, &s)?, skipped))
        }
        Modality::Audio | Modality::Symbolic => {
            let digest = model.digest()?;
            let mut rows = Vec::with_capacity(records.len());
            let mut skipped = Vec::new();
            for rec in records {
                let windows = match cache.slide(rec) {
                    Ok(w) => w,
                    Err(e) => {
                        log::warn!("skipping `{}`: {e}", rec.id);
                        skipped.push(SkippedTrack {
                            id: rec.id.clone(),
                            reason: e.to_string(),
                        });
                        continue;
                    }
                };
                let mut per_window: Vec<Vec<f32>> = Vec::with_capacity(windows.len());
                for chunk in windows.chunks(EMBED_CHUNK) {
                    let t = if modality == Modality::Audio {
                        let mels: Vec<_> = chunk.iter().map(|w| w.0.as_ref()).collect();
                        model.embed_audio(&mels)?
                    } else {
                        let seqs: Vec<_> = chunk.iter().map(|w| &w.1).collect();
                        model.embed_symbolic(&seqs)?
                    };
                    per_window.extend(t.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?);
                }
                let v = normalized_mean(&per_window)
                    .ok_or_else(|| Error::FusionDegenerate(rec.id.clone()))?;
                rows.push((rec.id.clone(), v));
            }
            Ok((EmbeddingStore::from_rows(rows, modality, digest)?, skipped))
        }
    }
}

/// Embedding of one query text. Texts are always encoded alone so a query's
/// vector never depends on what it was batched with.
pub fn embed_query(model: &TriModel, vocab: &Vocab, text: &str) -> Result<Vec<f32>> {
    Ok(model.encode_text(&tokenize_text(text, vocab))?.vector)
}

/// Text embeddings of the full (all-element) description of each record.
pub fn embed_texts(model: &TriModel, vocab: &Vocab, records: &[TrackRecord]) -> Result<Vec<(String, Vec<f32>)>> {
    records
        .iter()
        .map(|r| Ok((r.id.clone(), embed_query(model, vocab, &r.full_text())?)))
        .collect()
}

/// Per-item normalized mean of an audio and a symbolic store.
pub fn fuse(audio: &EmbeddingStore, symbolic: &EmbeddingStore) -> Result<EmbeddingStore> {
    if audio.ids != symbolic.ids {
        let missing = audio
            .ids
            .iter()
            .chain(&symbolic.ids)
            .find(|id| audio.position(id).is_none() || symbolic.position(id).is_none());
        return Err(Error::IdMismatch(match missing {
            Some(id) => format!("`{id}` is not in both stores"),
            None => "stores list ids in different orders".into(),
        }));
    }
    if audio.dim != symbolic.dim {
        return Err(Error::Shape(format!("dimension {} vs {}", audio.dim, symbolic.dim)));
    }
    let mut matrix = Vec::with_capacity(audio.len() * audio.dim);
    for (i, id) in audio.ids.iter().enumerate() {
        let pair = [audio.row(i).to_vec(), symbolic.row(i).to_vec()];
        matrix.extend(normalized_mean(&pair).ok_or_else(|| Error::FusionDegenerate(id.clone()))?);
    }
    EmbeddingStore::new(audio.ids.clone(), matrix, audio.dim, Modality::Fused, audio.model_digest)
}

/// One ranked item.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub index: usize,
    pub score: f64,
}

/// All items by descending dot product; ties broken by ascending id.
pub fn rank_scores(query: &[f32], store: &EmbeddingStore) -> Result<Vec<Scored>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if query.len() != store.dim {
        return Err(Error::Shape(format!(
            "query dimension {} vs store dimension {}",
            query.len(),
            store.dim
        )));
    }
    let mut scored: Vec<Scored> = (0..store.len())
        .map(|i| Scored {
            index: i,
            score: store
                .row(i)
                .iter()
                .zip(query)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum(),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| store.ids[a.index].cmp(&store.ids[b.index]))
    });
    Ok(scored)
}

/// Item ids ordered from most to least similar.
pub fn rank(query: &[f32], store: &EmbeddingStore) -> Result<Vec<String>> {
    Ok(rank_scores(query, store)?
        .into_iter()
        .map(|s| store.ids[s.index].clone())
        .collect())
}

/// 1-based rank of `target` for `query`.
pub fn rank_of(query: &[f32], store: &EmbeddingStore, target: &str) -> Result<usize> {
    let t = store
        .position(target)
        .ok_or_else(|| Error::IdMismatch(format!("`{target}` is not in the store")))?;
    let ranked = rank_scores(query, store)?;
    Ok(ranked.iter().position(|s| s.index == t).unwrap() + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentage of queries whose target is within the top K, keyed by K.
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub n_queries: usize,
    pub n_items: usize,
    pub item_modality: Option<Modality>,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// R@1/5/10 as percentages and the median rank (mean of the two middle
/// values for an even count).
pub fn compute_metrics(ranks: &[usize], n_items: usize) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::EmptyRanks);
    }
    if let Some(&rank) = ranks.iter().find(|&&r| r == 0 || r > n_items) {
        return Err(Error::RankOutOfRange { rank, n_items });
    }
    let n = ranks.len() as f64;
    let recall_at = RECALL_KS
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let m = sorted.len() / 2;
    let median_rank = if sorted.len() % 2 == 1 {
        sorted[m] as f64
    } else {
        (sorted[m - 1] + sorted[m]) as f64 / 2.0
    };
    Ok(MetricsReport {
        recall_at,
        median_rank,
        n_queries: ranks.len(),
        n_items,
        item_modality: None,
    })
}

/// Per-query outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: String,
    pub rank: usize,
}

/// Ranks each query's own item in `store`. Query ids must exist in the store.
pub fn evaluate_embeddings(
    queries: &[(String, Vec<f32>)],
    store: &EmbeddingStore,
) -> Result<(MetricsReport, Vec<QueryOutcome>)> {
    let mut outcomes = Vec::with_capacity(queries.len());
    for (id, q) in queries {
        outcomes.push(QueryOutcome {
            id: id.clone(),
            rank: rank_of(q, store, id)?,
        });
    }
    let ranks: Vec<usize> = outcomes.iter().map(|o| o.rank).collect();
    let mut report = compute_metrics(&ranks, store.len())?;
    report.item_modality = Some(store.modality);
    Ok((report, outcomes))
}

/// Item stores available for evaluation.
#[derive(Debug, Clone, Default)]
pub struct ItemStores {
    pub audio: Option<EmbeddingStore>,
    pub symbolic: Option<EmbeddingStore>,
    pub fused: Option<EmbeddingStore>,
}

impl ItemStores {
    /// The store to search for a modality, fusing on demand.
    pub fn resolve(&self, modality: Modality) -> Result<std::borrow::Cow<'_, EmbeddingStore>> {
        use std::borrow::Cow;
        let missing = |m: &str| Error::Config(format!("no {m} embedding store available"));
        match modality {
            Modality::Audio => self.audio.as_ref().map(Cow::Borrowed).ok_or_else(|| missing("audio")),
            Modality::Symbolic => self
                .symbolic
                .as_ref()
                .map(Cow::Borrowed)
                .ok_or_else(|| missing("symbolic")),
            Modality::Fused => match (&self.fused, &self.audio, &self.symbolic) {
                (Some(f), _, _) => Ok(Cow::Borrowed(f)),
                (None, Some(a), Some(s)) => Ok(Cow::Owned(fuse(a, s)?)),
                (None, None, _) => Err(missing("audio")),
                (None, _, None) => Err(missing("symbolic")),
            },
            Modality::Text => Err(Error::Config("text is a query modality, not an item modality".into())),
        }
    }
}

/// Text-to-music retrieval over the test records: each record's full text
/// queries the item store and the record's own item is the target.
pub fn evaluate(
    model: &TriModel,
    vocab: &Vocab,
    records: &[TrackRecord],
    stores: &ItemStores,
    item_modality: Modality,
) -> Result<(MetricsReport, Vec<QueryOutcome>)> {
    let store = stores.resolve(item_modality)?;
    let queries: Vec<TrackRecord> = records
        .iter()
        .filter(|r| store.position(&r.id).is_some())
        .cloned()
        .collect();
    if queries.len() < records.len() {
        log::warn!("{} test records have no item embedding", records.len() - queries.len());
    }
    let q = embed_texts(model, vocab, &queries)?;
    evaluate_embeddings(&q, &store)
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub section: String,
    pub label: String,
    /// One entry per dataset column; `None` renders as dashes.
    pub reports: Vec<Option<MetricsReport>>,
}

fn fmt_medr(m: f64) -> String {
    if m.fract() == 0.0 {
        format!("{m:.0}")
    } else {
        format!("{m:.1}")
    }
}

/// Markdown table with section header rows and R@1/5/10/MedR per dataset.
/// The best value of each column is bolded (highest recall, lowest MedR).
pub fn render_table(datasets: &[&str], rows: &[ReportRow]) -> String {
    let cols = datasets.len() * 4;
    let value = |r: &MetricsReport, c: usize| match c % 4 {
        3 => r.median_rank,
        k => r.recall(RECALL_KS[k]),
    };
    let mut best: Vec<Option<f64>> = vec![None; cols];
    for row in rows {
        for (c, b) in best.iter_mut().enumerate() {
            if let Some(Some(r)) = row.reports.get(c / 4) {
                let v = value(r, c);
                let better = match *b {
                    None => true,
                    Some(cur) if c % 4 == 3 => v < cur,
                    Some(cur) => v > cur,
                };
                if better && v.is_finite() {
                    *b = Some(v);
                }
            }
        }
    }
    let mut out = String::from("| Model |");
    for d in datasets {
        for m in ["R@1", "R@5", "R@10", "MedR"] {
            let _ = write!(out, " {d} {m} |");
        }
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(cols));
    out.push('\n');
    let mut section: Option<&str> = None;
    for row in rows {
        if section != Some(row.section.as_str()) {
            section = Some(&row.section);
            let _ = writeln!(out, "| **{}** |{}", row.section, " |".repeat(cols));
        }
        let _ = write!(out, "| {} |", row.label);
        for c in 0..cols {
            match row.reports.get(c / 4) {
                Some(Some(r)) => {
                    let v = value(r, c);
                    let s = if c % 4 == 3 { fmt_medr(v) } else { format!("{v:.2}") };
                    if best[c] == Some(v) {
                        let _ = write!(out, " **{s}** |");
                    } else {
                        let _ = write!(out, " {s} |");
                    }
                }
                _ => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn store(rows: &[(&str, Vec<f32>)], m: Modality) -> EmbeddingStore {
        EmbeddingStore::from_rows(
            rows.iter().map(|(id, v)| (id.to_string(), unit(v))).collect(),
            m,
            [7; 32],
        )
        .unwrap()
    }

    fn identity(n: usize) -> EmbeddingStore {
        let rows = (0..n)
            .map(|i| {
                let mut v = vec![0f32; n];
                v[i] = 1.0;
                (format!("item{i:04}"), v)
            })
            .collect();
        EmbeddingStore::from_rows(rows, Modality::Audio, [0; 32]).unwrap()
    }

    #[test]
    fn metrics_worked_example() {
        let r = compute_metrics(&[1, 3, 7, 12, 2], 20).unwrap();
        assert_eq!(r.recall(1), 20.0);
        assert_eq!(r.recall(5), 60.0);
        assert_eq!(r.recall(10), 80.0);
        assert_eq!(r.median_rank, 3.0);
    }

    #[test]
    fn even_count_median_averages_middle_pair() {
        let r = compute_metrics(&[4, 1, 2, 9], 10).unwrap();
        assert_eq!(r.median_rank, 3.0);
        let r = compute_metrics(&[1, 2], 10).unwrap();
        assert_eq!(r.median_rank, 1.5);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(compute_metrics(&[], 5), Err(Error::EmptyRanks)));
        assert!(matches!(
            compute_metrics(&[1, 6], 5),
            Err(Error::RankOutOfRange { rank: 6, n_items: 5 })
        ));
        assert!(matches!(compute_metrics(&[0], 5), Err(Error::RankOutOfRange { rank: 0, .. })));
    }

    #[test]
    fn identity_store_retrieves_itself() {
        let s = identity(199);
        let q: Vec<_> = (0..199).map(|i| (s.ids[i].clone(), s.row(i).to_vec())).collect();
        let (r, outcomes) = evaluate_embeddings(&q, &s).unwrap();
        assert_eq!(r.recall(1), 100.0);
        assert_eq!(r.median_rank, 1.0);
        assert!(outcomes.iter().all(|o| o.rank == 1));
    }

    #[test]
    fn rank_orders_by_score_then_id() {
        let s = store(
            &[("c", vec![1.0, 0.0]), ("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])],
            Modality::Audio,
        );
        assert_eq!(rank(&[1.0, 0.0], &s).unwrap(), vec!["a", "c", "b"]);
        assert_eq!(rank(&[0.0, 1.0], &s).unwrap()[0], "b");
    }

    #[test]
    fn rank_errors() {
        let empty = EmbeddingStore::new(vec![], vec![], 4, Modality::Audio, [0; 32]).unwrap();
        assert!(matches!(rank(&[0.0; 4], &empty), Err(Error::EmptyStore)));
        let s = identity(3);
        assert!(matches!(rank(&[1.0; 2], &s), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_is_normalized_mean() {
        let a = store(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])], Modality::Audio);
        let s = store(&[("x", vec![0.0, 1.0]), ("y", vec![0.0, 1.0])], Modality::Symbolic);
        let f = fuse(&a, &s).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((f.row(0)[0] - h).abs() < 1e-6 && (f.row(0)[1] - h).abs() < 1e-6);
        assert_eq!(f.row(1), &[0.0, 1.0]);
        assert_eq!(f.modality, Modality::Fused);
    }

    #[test]
    fn fusion_errors() {
        let a = store(&[("x", vec![1.0, 0.0])], Modality::Audio);
        let s = store(&[("z", vec![1.0, 0.0])], Modality::Symbolic);
        assert!(matches!(fuse(&a, &s), Err(Error::IdMismatch(_))));
        let s = store(&[("x", vec![-1.0, 0.0])], Modality::Symbolic);
        assert!(matches!(fuse(&a, &s), Err(Error::FusionDegenerate(id)) if id == "x"));
    }

    #[test]
    fn fused_without_stores_is_config_error() {
        let stores = ItemStores {
            audio: Some(identity(2)),
            ..Default::default()
        };
        assert!(matches!(stores.resolve(Modality::Fused), Err(Error::Config(_))));
        assert!(stores.resolve(Modality::Audio).is_ok());
    }

    #[test]
    fn store_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tbnd");
        let s = store(&[("α", vec![1.0, 2.0, 3.0]), ("b", vec![0.0, 1.0, 0.0])], Modality::Symbolic);
        s.save(&p).unwrap();
        assert_eq!(EmbeddingStore::load(&p).unwrap(), s);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(EmbeddingStore::load(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(EmbeddingStore::load(&p), Err(Error::Format(_))));
        assert!(matches!(
            EmbeddingStore::load(dir.path().join("absent")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn table_layout() {
        let r = |r1, r5, r10, m| {
            let mut rep = compute_metrics(&[1], 1).unwrap();
            rep.recall_at = [(1, r1), (5, r5), (10, r10)].into_iter().collect();
            rep.median_rank = m;
            rep
        };
        let rows = vec![
            ReportRow {
                section: "Pre-training & Fine-tuning".into(),
                label: "Audio".into(),
                reports: vec![Some(r(7.5, 30.0, 45.25, 12.0)), None],
            },
            ReportRow {
                section: "Pre-training & Fine-tuning".into(),
                label: "Trimodal".into(),
                reports: vec![Some(r(10.55, 35.67, 52.76, 10.0)), Some(r(1.0, 2.0, 3.0, 40.5))],
            },
        ];
        let t = render_table(&["In-domain", "Out-of-domain"], &rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("| Model | In-domain R@1 |"));
        assert!(lines[0].ends_with("Out-of-domain MedR |"));
        assert!(lines[2].contains("**Pre-training & Fine-tuning**"));
        assert_eq!(lines[3], "| Audio | 7.50 | 30.00 | 45.25 | 12 | - | - | - | - |");
        assert_eq!(
            lines[4],
            "| Trimodal | **10.55** | **35.67** | **52.76** | **10** | **1.00** | **2.00** | **3.00** | **40.5** |"
        );
    }

    #[test]
    fn three_rank_hand_example() {
        let r = compute_metrics(&[1, 3, 12], 12).unwrap();
        assert!((r.recall(1) - 33.33).abs() < 0.005);
        assert!((r.recall(5) - 66.67).abs() < 0.005);
        assert!((r.recall(10) - 66.67).abs() < 0.005);
        assert_eq!(r.median_rank, 3.0);
        let r = compute_metrics(&[1; 8], 8).unwrap();
        assert!(RECALL_KS.iter().all(|&k| r.recall(k) == 100.0));
        assert_eq!(r.median_rank, 1.0);
    }

    #[test]
    fn random_embeddings_have_chance_median_rank() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        for seed in 0..3u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| -> Vec<(String, Vec<f32>)> {
                (0..n)
                    .map(|i| {
                        let v: Vec<f32> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
                        (format!("t{i:03}"), unit(&v))
                    })
                    .collect()
            };
            let items = EmbeddingStore::from_rows(draw(199), Modality::Audio, [0; 32]).unwrap();
            let queries = draw(199);
            let (r, _) = evaluate_embeddings(&queries, &items).unwrap();
            assert!((80.0..=120.0).contains(&r.median_rank), "seed {seed}: {}", r.median_rank);
        }
    }

    #[test]
    fn orthogonal_fusion_geometry() {
        let a = store(&[("x", vec![1.0, 0.0, 0.0])], Modality::Audio);
        let s = store(&[("x", vec![0.0, 0.0, 1.0])], Modality::Symbolic);
        let f = fuse(&a, &s).unwrap();
        let dot = |u: &[f32], v: &[f32]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f32>();
        assert!((dot(f.row(0), f.row(0)) - 1.0).abs() < 1e-6);
        assert!((dot(f.row(0), a.row(0)) - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((dot(f.row(0), s.row(0)) - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        // symmetric, and idempotent on identical stores
        assert_eq!(fuse(&s, &a).unwrap().row(0), f.row(0));
        let same = fuse(&a, &a).unwrap();
        assert!(same.row(0).iter().zip(a.row(0)).all(|(x, y)| (x - y).abs() < 1e-7));
    }

    #[test]
    fn audio_eval_equals_fused_when_stores_agree() {
        let a = store(
            &[("p", vec![1.0, 0.2]), ("q", vec![0.1, 1.0]), ("r", vec![-1.0, 0.3])],
            Modality::Audio,
        );
        let mut s = a.clone();
        s.modality = Modality::Symbolic;
        let stores = ItemStores {
            audio: Some(a.clone()),
            symbolic: Some(s),
            fused: None,
        };
        let q = vec![
            ("p".to_string(), unit(&[0.9, 0.5])),
            ("q".to_string(), unit(&[-0.5, 1.0])),
            ("r".to_string(), unit(&[0.3, 0.3])),
        ];
        let (ra, _) = evaluate_embeddings(&q, &stores.resolve(Modality::Audio).unwrap()).unwrap();
        let (rf, _) = evaluate_embeddings(&q, &stores.resolve(Modality::Fused).unwrap()).unwrap();
        assert_eq!(ra.recall_at, rf.recall_at);
        assert_eq!(ra.median_rank, rf.median_rank);
    }

    #[test]
    fn trimodal_row_renders_and_tied_medr_is_flagged_twice() {
        let r = |v: [f64; 4]| {
            let mut rep = compute_metrics(&[1], 1).unwrap();
            rep.recall_at = [(1, v[0]), (5, v[1]), (10, v[2])].into_iter().collect();
            rep.median_rank = v[3];
            rep
        };
        let rows = vec![ReportRow {
            section: "Pre-training & Fine-tuning".into(),
            label: "Trimodal".into(),
            reports: vec![Some(r([10.55, 35.67, 52.76, 10.0])), Some(r([15.38, 41.03, 51.28, 10.0]))],
        }];
        let t = render_table(&["In-domain", "Out-of-domain"], &rows);
        assert!(t.contains(
            "| Trimodal | **10.55** | **35.67** | **52.76** | **10** | **15.38** | **41.03** | **51.28** | **10** |"
        ));
        let tied = vec![
            ReportRow {
                section: "Combined Training".into(),
                label: "Audio".into(),
                reports: vec![Some(r([1.0, 2.0, 3.0, 10.0]))],
            },
            ReportRow {
                section: "Combined Training".into(),
                label: "Symbolic".into(),
                reports: vec![Some(r([2.0, 1.0, 3.0, 10.0]))],
            },
        ];
        let t = render_table(&["In-domain"], &tied);
        assert!(t.contains("| Audio | 1.00 | **2.00** | **3.00** | **10** |"));
        assert!(t.contains("| Symbolic | **2.00** | 1.00 | **3.00** | **10** |"));
        // a single report is a single data row
        let one = render_table(&["In-domain"], &tied[..1]);
        assert_eq!(one.lines().filter(|l| l.starts_with("| Audio")).count(), 1);
    }

    proptest! {
        #[test]
        fn metrics_match_naive(ranks in prop::collection::vec(1usize..=50, 1..60)) {
            let r = compute_metrics(&ranks, 50).unwrap();
            for k in RECALL_KS {
                let hits = ranks.iter().filter(|&&x| x <= k).count();
                prop_assert!((r.recall(k) - 100.0 * hits as f64 / ranks.len() as f64).abs() < 1e-9);
            }
            prop_assert!(r.recall(1) <= r.recall(5) && r.recall(5) <= r.recall(10));
            // median: at least half the ranks on each side
            let below = ranks.iter().filter(|&&x| x as f64 <= r.median_rank).count();
            let above = ranks.iter().filter(|&&x| x as f64 >= r.median_rank).count();
            prop_assert!(2 * below >= ranks.len() && 2 * above >= ranks.len());
        }

        #[test]
        fn ranking_is_a_permutation_sorted_by_score(
            rows in prop::collection::vec(prop::collection::vec(-1f32..1.0, 4), 1..20),
            q in prop::collection::vec(-1f32..1.0, 4),
        ) {
            let rows: Vec<(String, Vec<f32>)> =
                rows.into_iter().enumerate().map(|(i, v)| (format!("{i:03}"), v)).collect();
            let s = EmbeddingStore::from_rows(rows, Modality::Audio, [0; 32]).unwrap();
            let ranked = rank_scores(&q, &s).unwrap();
            let mut seen: Vec<usize> = ranked.iter().map(|x| x.index).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..s.len()).collect::<Vec<_>>());
            // brute-force oracle: sort (-score, id) pairs
            let mut oracle: Vec<(f64, String)> = (0..s.len())
                .map(|i| (-s.row(i).iter().zip(&q).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>(), s.ids[i].clone()))
                .collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let ids: Vec<String> = oracle.into_iter().map(|o| o.1).collect();
            prop_assert_eq!(rank(&q, &s).unwrap(), ids);
        }
    }
}

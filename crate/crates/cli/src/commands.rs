use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tribind_core::audio::{load_and_resample, segment, SegmentPolicy, SAMPLE_RATE, SEGMENT_SECONDS};
use tribind_core::corpus::{load_manifest, make_split, write_manifest, DatasetManifest, Source, Split, TrackRecord};
use tribind_core::data::DataCache;
use tribind_core::encoders::{load_checkpoint, Modality, TriModel};
use tribind_core::midi::{parse_midi, tokenize_segment, BarFlag, CpToken};
use tribind_core::retrieval::{
    embed_corpus, embed_query, evaluate as run_evaluation, rank_scores, render_table, EmbeddingStore, ItemStores,
    MetricsReport, ReportRow,
};
use tribind_core::synth;
use tribind_core::text::{build_vocab as build_subword_vocab, Vocab};
use tribind_core::trainer::{final_checkpoint, Strategy, TrainMode, Trainer, ValidationSets};

use crate::config::RunFile;
use crate::{EmbedKind, ItemKind, SplitArg, SynthKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tribind_core::Error),

    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),

    #[error("{0}: {1}")]
    Config(PathBuf, String),

    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

impl ItemKind {
    pub fn modality(self) -> Modality {
        match self {
            ItemKind::Audio => Modality::Audio,
            ItemKind::Symbolic => Modality::Symbolic,
            ItemKind::Fused => Modality::Fused,
        }
    }
}

impl SplitArg {
    fn filter(self, m: &DatasetManifest) -> Vec<TrackRecord> {
        let split = match self {
            SplitArg::All => return m.records.clone(),
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        };
        m.by_split(split)
    }
}

/// A checkpoint directory (or `model.ckpt` inside one) plus the vocab beside it.
fn load_model(checkpoint: &Path) -> Result<(TriModel, Vocab)> {
    let ckpt = if checkpoint.is_dir() {
        checkpoint.join("model.ckpt")
    } else {
        checkpoint.to_path_buf()
    };
    let vocab = Vocab::load(ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt"))?;
    Ok((load_checkpoint(&ckpt)?, vocab))
}

fn load_store(path: Option<PathBuf>) -> Result<Option<EmbeddingStore>> {
    Ok(path.map(EmbeddingStore::load).transpose()?)
}

pub fn prepare(manifest: &Path, ratios: &str, seed: u64, out: Option<&Path>) -> Result<()> {
    let ratios: Vec<f64> = ratios
        .split(',')
        .map(|r| r.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad --split `{ratios}`: {e}")))?;
    let m = make_split(&load_manifest(manifest)?, &ratios, seed)?;
    let out = out.unwrap_or(manifest);
    write_manifest(&m, out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let weak = m.select(Source::Weak, split).len();
        let strong = m.select(Source::Strong, split).len();
        println!("{:<6} weak {weak:>6}  strong {strong:>6}", split.as_str());
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn inspect_audio(uri: &Path) -> Result<()> {
    let wave = load_and_resample(uri, SAMPLE_RATE)?;
    let windows = segment(&wave, SEGMENT_SECONDS, SegmentPolicy::Slide, &mut ChaCha8Rng::seed_from_u64(0));
    println!("duration_sec {:.3}", wave.duration_sec());
    println!("sample_rate  {}", wave.sample_rate);
    println!("segments     {}", windows.len());
    Ok(())
}

pub fn tokenize(midi: &Path, start_sec: f64) -> Result<()> {
    let (notes, grid) = parse_midi(midi)?;
    let seq = tokenize_segment(&notes, &grid, start_sec, SEGMENT_SECONDS);
    println!("{:>4}  {:<4} {:>3} {:>5} {:>4}", "#", "bar", "pos", "pitch", "dur");
    for (i, t) in seq.tokens().iter().enumerate() {
        match t {
            CpToken::Note(n) => {
                let bar = match n.bar {
                    BarFlag::New => "NEW",
                    BarFlag::Cont => "CONT",
                };
                println!("{i:>4}  {bar:<4} {:>3} {:>5} {:>4}", n.position, n.pitch, n.duration);
            }
            // padding runs to the end
            CpToken::Pad => break,
        }
    }
    println!("{} notes, {} tokens", seq.len_notes(), seq.tokens().len());
    Ok(())
}

pub fn build_vocab(manifest: &Path, size: usize, out: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let texts: Vec<String> = m.records.iter().map(|r| r.full_text()).collect();
    let vocab = build_subword_vocab(&texts, size);
    vocab.save(out)?;
    println!("{} pieces -> {}", vocab.len(), out.display());
    Ok(())
}

pub fn train(config: &Path, strategy: Option<&str>, modality: Option<&str>, run_dir: Option<PathBuf>) -> Result<()> {
    let mut run = RunFile::load(config)?;
    if let Some(s) = strategy {
        run.train.strategy = Strategy::parse(s).ok_or_else(|| CliError::Usage(format!("unknown strategy `{s}`")))?;
    }
    if let Some(m) = modality {
        run.train.mode = TrainMode::parse(m).ok_or_else(|| CliError::Usage(format!("unknown modality `{m}`")))?;
    }
    if let Some(d) = run_dir {
        run.run_dir = d;
    }
    let m = load_manifest(&run.manifest)?;
    let weak = m.select(Source::Weak, Split::Train);
    let strong = m.select(Source::Strong, Split::Train);
    if weak.is_empty() && strong.is_empty() {
        return Err(CliError::Usage("manifest has no train split; run `tribind prepare` first".into()));
    }
    let vocab = match &run.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let texts: Vec<String> = weak.iter().chain(&strong).map(|r| r.full_text()).collect();
            build_subword_vocab(&texts, run.train.vocab_size)
        }
    };
    log::info!(
        "training {:?}/{:?}: {} weak, {} strong train records",
        run.train.strategy,
        run.train.mode,
        weak.len(),
        strong.len()
    );
    let mut trainer = Trainer::new(run.train.clone(), vocab, &run.run_dir)?;
    trainer.validation = ValidationSets {
        weak: m.select(Source::Weak, Split::Val),
        strong: m.select(Source::Strong, Split::Val),
    };
    let metas = trainer.run(&weak, &strong)?;
    let best = final_checkpoint(&metas)?;
    let final_path = run.run_dir.join("final.json");
    std::fs::write(&final_path, serde_json::to_string_pretty(best).map_err(tribind_core::Error::from)?)
        .map_err(|e| CliError::Io(final_path.clone(), e))?;
    println!(
        "final checkpoint {} (step {}, val R@1 {:.2}, MedR {})",
        best.path.display(),
        best.step,
        best.val_recalls[0],
        best.val_medr
    );
    Ok(())
}

pub fn embed(checkpoint: &Path, manifest: &Path, modality: EmbedKind, split: SplitArg, out: &Path) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let records = split.filter(&load_manifest(manifest)?);
    let modality = match modality {
        EmbedKind::Audio => Modality::Audio,
        EmbedKind::Symbolic => Modality::Symbolic,
    };
    let (store, skipped) = embed_corpus(&model, &records, modality, &mut DataCache::default())?;
    for s in &skipped {
        eprintln!("skipped {}: {}", s.id, s.reason);
    }
    store.save(out)?;
    println!("{} {} embeddings -> {}", store.len(), modality, out.display());
    Ok(())
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: SplitArg,
    pub items: Vec<ItemKind>,
    pub audio_store: Option<PathBuf>,
    pub symbolic_store: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub dataset: String,
    pub label: String,
    pub rankings: Option<PathBuf>,
}

fn print_metrics(r: &MetricsReport) {
    println!(
        "{:<9} R@1 {:>6.2}  R@5 {:>6.2}  R@10 {:>6.2}  MedR {:>5}  ({} queries, {} items)",
        r.item_modality.map(|m| m.as_str()).unwrap_or("-"),
        r.recall(1),
        r.recall(5),
        r.recall(10),
        r.median_rank,
        r.n_queries,
        r.n_items
    );
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (model, vocab) = load_model(&args.checkpoint)?;
    let records = args.split.filter(&load_manifest(&args.manifest)?);
    if records.is_empty() {
        return Err(CliError::Usage("no records in the selected split".into()));
    }
    let mut stores = ItemStores {
        audio: load_store(args.audio_store)?,
        symbolic: load_store(args.symbolic_store)?,
        fused: None,
    };
    let digest = model.digest()?;
    for s in stores.audio.iter().chain(&stores.symbolic) {
        if s.model_digest != digest {
            return Err(tribind_core::Error::DigestMismatch {
                expected: hex::encode(digest),
                found: hex::encode(s.model_digest),
            }
            .into());
        }
    }
    let mut cache = DataCache::default();
    let want_audio = args.items.iter().any(|i| matches!(i, ItemKind::Audio | ItemKind::Fused));
    let want_symbolic = args.items.iter().any(|i| matches!(i, ItemKind::Symbolic | ItemKind::Fused));
    if want_audio && stores.audio.is_none() {
        stores.audio = Some(embed_corpus(&model, &records, Modality::Audio, &mut cache)?.0);
    }
    if want_symbolic && stores.symbolic.is_none() {
        stores.symbolic = Some(embed_corpus(&model, &records, Modality::Symbolic, &mut cache)?.0);
    }

    let mut rows = Vec::new();
    let mut rankings = match &args.rankings {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| CliError::Io(p.clone(), e))?,
        )),
        None => None,
    };
    for item in &args.items {
        let modality = item.modality();
        let (report, _) = run_evaluation(&model, &vocab, &records, &stores, modality)?;
        print_metrics(&report);
        if let Some(w) = rankings.as_mut() {
            let store = stores.resolve(modality)?;
            for r in records.iter().filter(|r| store.position(&r.id).is_some()) {
                let text = r.full_text();
                let ranked = rank_scores(&embed_query(&model, &vocab, &text)?, &store)?;
                let results: Vec<serde_json::Value> = ranked
                    .iter()
                    .map(|s| serde_json::json!({ "id": store.ids[s.index], "score": s.score }))
                    .collect();
                let line = serde_json::json!({
                    "query_id": r.id,
                    "text": text,
                    "item_modality": modality.as_str(),
                    "results": results,
                });
                writeln!(w, "{line}").map_err(|e| CliError::Io(args.rankings.clone().unwrap(), e))?;
            }
        }
        rows.push(ReportRow {
            section: args.label.clone(),
            label: format!("{} items", modality.as_str()),
            reports: vec![Some(report)],
        });
    }
    if let Some(w) = rankings.as_mut() {
        w.flush().map_err(|e| CliError::Io(args.rankings.clone().unwrap(), e))?;
    }
    if let Some(p) = &args.report {
        std::fs::write(p, render_table(&[args.dataset.as_str()], &rows)).map_err(|e| CliError::Io(p.clone(), e))?;
        println!("report -> {}", p.display());
    }
    Ok(())
}

pub fn search(
    checkpoint: &Path,
    audio_store: Option<PathBuf>,
    symbolic_store: Option<PathBuf>,
    items: ItemKind,
    text: &str,
    k: usize,
) -> Result<()> {
    let (model, vocab) = load_model(checkpoint)?;
    let stores = ItemStores {
        audio: load_store(audio_store)?,
        symbolic: load_store(symbolic_store)?,
        fused: None,
    };
    let store = stores.resolve(items.modality())?;
    let ranked = rank_scores(&embed_query(&model, &vocab, text)?, &store)?;
    for (i, s) in ranked.iter().take(k).enumerate() {
        println!("{:>4}  {:.6}  {}", i + 1, s.score, store.ids[s.index]);
    }
    Ok(())
}

pub fn serve(host: &str, port: u16, opts: tribind_service::ServeOptions) -> Result<()> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {host}:{port}: {e}")))?;
    let index = tribind_service::SearchIndex::load(&opts)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(tribind_service::serve(index, addr))
        .map_err(|e| CliError::Usage(format!("server error: {e}")))
}

pub fn synth(kind: SynthKind, out: &Path, n: usize, seed: u64) -> Result<()> {
    match kind {
        SynthKind::Overfit => {
            let m = synth::write_corpus(out, &synth::overfit_corpus(n.min(16), seed))?;
            println!("{} tracks -> {}", m.records.len(), out.join(synth::MANIFEST_FILE).display());
        }
        SynthKind::Complementarity => {
            let m = synth::write_corpus(out, &synth::complementarity_corpus(seed))?;
            println!("{} tracks -> {}", m.records.len(), out.join(synth::MANIFEST_FILE).display());
        }
        SynthKind::MultiSource => {
            let (main, ood) = synth::multi_source_corpus(n, (n / 4).max(1), (n / 4).max(1), seed);
            let m = synth::write_corpus(out, &main)?;
            let o = synth::write_corpus(out.join("ood"), &ood)?;
            println!(
                "{} tracks -> {}; {} out-of-domain -> {}",
                m.records.len(),
                out.join(synth::MANIFEST_FILE).display(),
                o.records.len(),
                out.join("ood").join(synth::MANIFEST_FILE).display()
            );
        }
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(name = "tribind", version, about = "Trimodal text-to-music retrieval")]
struct Cli {
    /// Log filter, e.g. `info` or `tribind_core=debug`. Overrides RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ItemKind {
    Audio,
    Symbolic,
    Fused,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EmbedKind {
    Audio,
    Symbolic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    Overfit,
    Complementarity,
    MultiSource,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assign train/val/test splits, stratified by source.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        /// Train,val,test ratios.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print duration, sample rate and evaluation segment count of an audio file.
    InspectAudio { uri: PathBuf },
    /// Print the compound-word tokens of the 20 s window starting at `--start-sec`.
    Tokenize {
        #[arg(long)]
        midi: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        start_sec: f64,
    },
    /// Build a subword vocabulary from the manifest's texts.
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 4000)]
        size: usize,
        #[arg(long, default_value = "vocab.txt")]
        out: PathBuf,
    },
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// combined | pt_ft
        #[arg(long)]
        strategy: Option<String>,
        /// trimodal | audio | symbolic
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Precompute an item embedding store.
    Embed {
        /// Checkpoint directory (or its model.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        modality: EmbedKind,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-to-music retrieval metrics over a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Item modalities to evaluate, comma separated.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "fused")]
        items: Vec<ItemKind>,
        /// Precomputed stores; embedded on the fly when absent.
        #[arg(long)]
        audio_store: Option<PathBuf>,
        #[arg(long)]
        symbolic_store: Option<PathBuf>,
        /// Write a markdown results table.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Dataset column name in the report.
        #[arg(long, default_value = "Test")]
        dataset: String,
        /// Row label in the report.
        #[arg(long, default_value = "tribind")]
        label: String,
        /// Write every query's full ranking as JSON lines.
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Rank a store for one free-text query.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio_store: Option<PathBuf>,
        #[arg(long)]
        symbolic_store: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fused")]
        items: ItemKind,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Run the HTTP search service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        audio_store: Option<PathBuf>,
        #[arg(long)]
        symbolic_store: Option<PathBuf>,
        /// Manifest supplying item metadata.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write one of the built-in synthetic corpora.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        /// Track count (overfit) or weak-source count (multi-source).
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let Some(filter) = &cli.log {
        logger.parse_filters(filter);
    }
    logger.init();

    let result = match cli.command {
        Command::Prepare {
            manifest,
            split,
            seed,
            out,
        } => commands::prepare(&manifest, &split, seed, out.as_deref()),
        Command::InspectAudio { uri } => commands::inspect_audio(&uri),
        Command::Tokenize { midi, start_sec } => commands::tokenize(&midi, start_sec),
        Command::BuildVocab { manifest, size, out } => commands::build_vocab(&manifest, size, &out),
        Command::Train {
            config,
            strategy,
            modality,
            run_dir,
        } => commands::train(&config, strategy.as_deref(), modality.as_deref(), run_dir),
        Command::Embed {
            checkpoint,
            manifest,
            modality,
            split,
            out,
        } => commands::embed(&checkpoint, &manifest, modality, split, &out),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            items,
            audio_store,
            symbolic_store,
            report,
            dataset,
            label,
            rankings,
        } => commands::evaluate(commands::EvaluateArgs {
            checkpoint,
            manifest,
            split,
            items,
            audio_store,
            symbolic_store,
            report,
            dataset,
            label,
            rankings,
        }),
        Command::Search {
            checkpoint,
            audio_store,
            symbolic_store,
            items,
            text,
            k,
        } => commands::search(&checkpoint, audio_store, symbolic_store, items, &text, k),
        Command::Serve {
            port,
            host,
            checkpoint,
            vocab,
            audio_store,
            symbolic_store,
            manifest,
        } => commands::serve(
            &host,
            port,
            tribind_service::ServeOptions {
                checkpoint,
                vocab,
                audio_store,
                symbolic_store,
                manifest,
            },
        ),
        Command::Synth { kind, out, n, seed } => commands::synth(kind, &out, n, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

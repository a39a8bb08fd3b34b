//! Contrastive training loop: combined multi-source training, two-phase
//! pre-training and fine-tuning, validation and MedR-based checkpoint selection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{pair_loss_tensor, trimodal_loss_tensor};
use crate::corpus::{sample_mixed_batch, MixtureSpec, Source, TrackRecord};
use crate::data::{prepare_batch, Batch, DataCache};
use crate::encoders::{save_checkpoint, EncoderConfig, Modality, Precision, Preset, TriModel};
use crate::error::{Error, Result};
use crate::retrieval::{embed_corpus, evaluate, ItemStores, MetricsReport, RECALL_KS};
use crate::text::{Vocab, DEFAULT_KEEP_PROB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "combined")]
    Combined,
    #[serde(rename = "pt_ft", alias = "pretrain_finetune")]
    PretrainFinetune,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "combined" => Some(Self::Combined),
            "pt_ft" | "pretrain_finetune" => Some(Self::PretrainFinetune),
            _ => None,
        }
    }
}

/// Which encoders are trained against text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Trimodal,
    /// Audio-text only.
    Audio,
    /// Symbolic-text only.
    Symbolic,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "trimodal" => Some(Self::Trimodal),
            "audio" => Some(Self::Audio),
            "symbolic" | "midi" => Some(Self::Symbolic),
            _ => None,
        }
    }

    /// Item side searched during validation and evaluation.
    pub fn item_modality(self) -> Modality {
        match self {
            Self::Trimodal => Modality::Fused,
            Self::Audio => Modality::Audio,
            Self::Symbolic => Modality::Symbolic,
        }
    }

    /// Parameter prefixes updated in this mode.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Self::Trimodal => &["audio.", "symbolic.", "text.", "temperature."],
            Self::Audio => &["audio.", "text.", "temperature."],
            Self::Symbolic => &["symbolic.", "text.", "temperature."],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Combined,
    Pretrain,
    Finetune,
}

/// Length of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseLength {
    Steps(usize),
    /// Passes over the phase's pool, rounded up to whole batches.
    Epochs(usize),
}

impl PhaseLength {
    pub fn steps(self, pool_len: usize, batch_size: usize) -> usize {
        match self {
            Self::Steps(n) => n,
            Self::Epochs(e) => e * pool_len.div_ceil(batch_size.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    #[serde(rename = "modality")]
    pub mode: TrainMode,
    pub preset: Preset,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub mixture: MixtureSpec,
    pub combined: PhaseLength,
    pub pretrain: PhaseLength,
    pub finetune: PhaseLength,
    pub seed: u64,
    /// Validate and checkpoint every this many steps (0: only at phase end).
    pub eval_every: usize,
    pub precision: Precision,
    pub text_keep_prob: f64,
    /// End a phase once validation R@1 reaches 100.
    pub stop_at_perfect_recall: bool,
    /// Vocabulary size used when the trainer builds its own vocabulary.
    pub vocab_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Combined,
            mode: TrainMode::Trimodal,
            preset: Preset::Desk,
            lr: 5e-5,
            weight_decay: 0.2,
            batch_size: 64,
            mixture: MixtureSpec::default(),
            combined: PhaseLength::Steps(1000),
            pretrain: PhaseLength::Steps(1000),
            finetune: PhaseLength::Steps(500),
            seed: 0,
            eval_every: 100,
            precision: Precision::Single,
            text_keep_prob: DEFAULT_KEEP_PROB,
            stop_at_perfect_recall: false,
            vocab_size: 4000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 to provide negatives".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid weight decay {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.text_keep_prob) {
            return Err(Error::Config("text_keep_prob must lie in [0, 1]".into()));
        }
        self.mixture.validate()
    }

    pub fn encoder_config(&self, vocab: &Vocab) -> EncoderConfig {
        EncoderConfig::preset(self.preset, vocab.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub phase: Phase,
    pub val_medr: f64,
    /// Validation R@1, R@5, R@10 in percent.
    pub val_recalls: [f64; 3],
    pub path: PathBuf,
}

/// Lowest validation MedR, ties to the earliest step.
pub fn select_checkpoint(metas: &[CheckpointMeta]) -> Result<&CheckpointMeta> {
    metas
        .iter()
        .min_by(|a, b| a.val_medr.total_cmp(&b.val_medr).then(a.step.cmp(&b.step)))
        .ok_or(Error::EmptyCheckpointList)
}

/// The checkpoint a finished run hands on: the best of its last phase.
pub fn final_checkpoint(metas: &[CheckpointMeta]) -> Result<&CheckpointMeta> {
    let last = metas.last().ok_or(Error::EmptyCheckpointList)?.phase;
    let idx: Vec<usize> = (0..metas.len()).filter(|&i| metas[i].phase == last).collect();
    let phase: Vec<CheckpointMeta> = idx.iter().map(|&i| metas[i].clone()).collect();
    let best = select_checkpoint(&phase)?;
    Ok(&metas[idx[phase.iter().position(|m| m == best).unwrap()]])
}

/// AdamW over the trainable parameters: one group with weight decay, one
/// without (temperature, normalization gains and biases, linear biases).
pub struct Optimizer {
    decayed: AdamW,
    plain: AdamW,
}

impl Optimizer {
    pub fn new(model: &TriModel, mode: TrainMode, lr: f64, weight_decay: f64) -> Result<Self> {
        let (decay, plain) = model.params.groups(mode.trainable_prefixes());
        let params = |wd| ParamsAdamW {
            lr,
            weight_decay: wd,
            ..Default::default()
        };
        Ok(Self {
            decayed: AdamW::new(decay, params(weight_decay))?,
            plain: AdamW::new(plain, params(0.0))?,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.decayed.step(grads)?;
        self.plain.step(grads)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grads_applied: bool,
}

/// One optimization step: encode, contrastive loss, backward, update,
/// temperature clamp. A non-finite loss aborts before any update.
pub fn train_step(
    model: &TriModel,
    optimizer: &mut Optimizer,
    batch: &Batch,
    mode: TrainMode,
    step: usize,
) -> Result<StepOutcome> {
    if batch.len() < 2 {
        return Err(Error::Shape("a contrastive batch needs at least two items".into()));
    }
    let lit = model.temperature.log_inv_tau();
    let zt = model.embed_text(&batch.text_refs())?;
    let loss = match mode {
        TrainMode::Trimodal => {
            let za = model.embed_audio(&batch.mel_refs())?;
            let zm = model.embed_symbolic(&batch.token_refs())?;
            trimodal_loss_tensor(&za, &zm, &zt, lit)?
        }
        TrainMode::Audio => pair_loss_tensor(&model.embed_audio(&batch.mel_refs())?, &zt, lit)?,
        TrainMode::Symbolic => pair_loss_tensor(&model.embed_symbolic(&batch.token_refs())?, &zt, lit)?,
    };
    let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        log::error!(
            "non-finite loss {value} at step {step}; tau {:?}; batch ids {:?}",
            model.temperature.tau().ok(),
            batch.ids
        );
        return Err(Error::NonFiniteLoss { step, loss: value });
    }
    let grads = loss.backward()?;
    optimizer.step(&grads)?;
    model.temperature.clamp()?;
    Ok(StepOutcome {
        loss: value,
        grads_applied: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub weak: usize,
    pub strong: usize,
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub tau: f64,
    pub source_counts: SourceCounts,
}

/// Validation records per source. An empty list falls back to the other
/// source, then to the phase's training pool.
#[derive(Debug, Clone, Default)]
pub struct ValidationSets {
    pub weak: Vec<TrackRecord>,
    pub strong: Vec<TrackRecord>,
}

/// Owns the model, optimizer state, RNG and run directory.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: TriModel,
    pub vocab: Vocab,
    pub validation: ValidationSets,
    /// Every logged step of this trainer, in order.
    pub history: Vec<StepRecord>,
    /// Parameter digest at the start of each phase.
    pub phase_start_digests: Vec<(Phase, [u8; 32])>,
    run_dir: PathBuf,
    cache: DataCache,
    rng: ChaCha8Rng,
    optimizer: Optimizer,
    step: usize,
    log: BufWriter<File>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocab, run_dir: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let mut model = TriModel::new(&config.encoder_config(&vocab), config.seed)?;
        model.precision = config.precision;
        Self::with_model(config, vocab, model, run_dir)
    }

    pub fn with_model(config: TrainConfig, vocab: Vocab, model: TriModel, run_dir: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        if model.config.text.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model expects {} text tokens, vocabulary has {}",
                model.config.text.vocab_size,
                vocab.len()
            )));
        }
        let run_dir = run_dir.as_ref().to_path_buf();
        std::fs::create_dir_all(run_dir.join("checkpoints"))?;
        std::fs::write(run_dir.join("train_config.json"), serde_json::to_string_pretty(&config)?)?;
        let log = BufWriter::new(File::create(run_dir.join("log.jsonl"))?);
        let optimizer = Optimizer::new(&model, config.mode, config.lr, config.weight_decay)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a),
            config,
            model,
            vocab,
            validation: ValidationSets::default(),
            history: Vec::new(),
            phase_start_digests: Vec::new(),
            run_dir,
            cache: DataCache::default(),
            optimizer,
            step: 0,
            log,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    /// Global step counter (continues across phases).
    pub fn global_step(&self) -> usize {
        self.step
    }

    pub fn run(&mut self, weak: &[TrackRecord], strong: &[TrackRecord]) -> Result<Vec<CheckpointMeta>> {
        match self.config.strategy {
            Strategy::Combined => self.run_combined(weak, strong),
            Strategy::PretrainFinetune => self.run_pretrain_finetune(weak, strong),
        }
    }

    /// Both sources mixed inside every batch at the configured ratio.
    pub fn run_combined(&mut self, weak: &[TrackRecord], strong: &[TrackRecord]) -> Result<Vec<CheckpointMeta>> {
        let m = self.config.mixture;
        let pool = if m.weak_weight > 0.0 { weak.len() } else { 0 } + if m.strong_weight > 0.0 { strong.len() } else { 0 };
        let steps = self.config.combined.steps(pool, self.config.batch_size);
        let val = pick_validation(&self.validation.strong, &self.validation.weak, strong, weak);
        self.run_phase(Phase::Combined, weak, strong, m, steps, &val)
    }

    /// Weak-only pre-training, then strong-only fine-tuning of all parameters
    /// starting from the best pre-training checkpoint with fresh optimizer state.
    pub fn run_pretrain_finetune(
        &mut self,
        weak: &[TrackRecord],
        strong: &[TrackRecord],
    ) -> Result<Vec<CheckpointMeta>> {
        let bs = self.config.batch_size;
        let pre_steps = self.config.pretrain.steps(weak.len(), bs);
        let fine_steps = self.config.finetune.steps(strong.len(), bs);
        if pre_steps > 0 && weak.is_empty() {
            return Err(Error::EmptyPool(Source::Weak));
        }
        if fine_steps > 0 && strong.is_empty() {
            return Err(Error::EmptyPool(Source::Strong));
        }
        let val = pick_validation(&self.validation.weak, &self.validation.strong, weak, strong);
        let weak_only = MixtureSpec::new(1.0, 0.0)?;
        let mut metas = self.run_phase(Phase::Pretrain, weak, &[], weak_only, pre_steps, &val)?;
        if let Ok(best) = select_checkpoint(&metas) {
            log::info!("fine-tuning from step {} (val MedR {})", best.step, best.val_medr);
            self.model.load_params(best.path.join("model.ckpt"))?;
        }
        self.optimizer = Optimizer::new(&self.model, self.config.mode, self.config.lr, self.config.weight_decay)?;
        let val = pick_validation(&self.validation.strong, &[], strong, &[]);
        let strong_only = MixtureSpec::new(0.0, 1.0)?;
        metas.extend(self.run_phase(Phase::Finetune, &[], strong, strong_only, fine_steps, &val)?);
        Ok(metas)
    }

    fn run_phase(
        &mut self,
        phase: Phase,
        weak: &[TrackRecord],
        strong: &[TrackRecord],
        mixture: MixtureSpec,
        steps: usize,
        val: &[TrackRecord],
    ) -> Result<Vec<CheckpointMeta>> {
        self.phase_start_digests.push((phase, self.model.digest()?));
        let mut metas = Vec::new();
        for i in 1..=steps {
            self.step += 1;
            let records = sample_mixed_batch(weak, strong, &mixture, self.config.batch_size, &mut self.rng)?;
            let batch = prepare_batch(
                &records,
                &mut self.cache,
                &self.vocab,
                self.config.text_keep_prob,
                &mut self.rng,
            )?;
            let out = train_step(&self.model, &mut self.optimizer, &batch, self.config.mode, self.step)?;
            let weak_n = batch.weak_count();
            let rec = StepRecord {
                step: self.step,
                phase,
                loss: out.loss,
                tau: self.model.temperature.tau()?,
                source_counts: SourceCounts {
                    weak: weak_n,
                    strong: batch.len() - weak_n,
                },
            };
            writeln!(self.log, "{}", serde_json::to_string(&rec)?)?;
            self.history.push(rec);
            let due = self.config.eval_every > 0 && i % self.config.eval_every == 0;
            if due || i == steps {
                self.log.flush()?;
                let meta = self.checkpoint(phase, val)?;
                log::info!(
                    "step {} ({phase:?}) loss {:.4} val R@1 {:.2} MedR {}",
                    meta.step,
                    out.loss,
                    meta.val_recalls[0],
                    meta.val_medr
                );
                let perfect = meta.val_recalls[0] >= 100.0;
                metas.push(meta);
                if perfect && self.config.stop_at_perfect_recall {
                    break;
                }
            }
        }
        self.log.flush()?;
        Ok(metas)
    }

    /// Text-to-item retrieval on `records` with the current parameters.
    pub fn validate(&mut self, records: &[TrackRecord]) -> Result<MetricsReport> {
        validate_model(&self.model, &self.vocab, records, self.config.mode.item_modality(), &mut self.cache)
    }

    fn checkpoint(&mut self, phase: Phase, val: &[TrackRecord]) -> Result<CheckpointMeta> {
        let report = self.validate(val)?;
        let dir = self.run_dir.join("checkpoints").join(format!("step_{}", self.step));
        std::fs::create_dir_all(&dir)?;
        save_checkpoint(&self.model, dir.join("model.ckpt"))?;
        self.vocab.save(dir.join("vocab.txt"))?;
        let meta = CheckpointMeta {
            step: self.step,
            phase,
            val_medr: report.median_rank,
            val_recalls: RECALL_KS.map(|k| report.recall(k)),
            path: dir.clone(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(meta)
    }
}

fn pick_validation(
    first: &[TrackRecord],
    second: &[TrackRecord],
    train_a: &[TrackRecord],
    train_b: &[TrackRecord],
) -> Vec<TrackRecord> {
    [first, second, train_a, train_b]
        .into_iter()
        .find(|s| !s.is_empty())
        .unwrap_or(&[])
        .to_vec()
}

/// Embeds `records` on the item side and ranks them with their full texts.
pub fn validate_model(
    model: &TriModel,
    vocab: &Vocab,
    records: &[TrackRecord],
    item_modality: Modality,
    cache: &mut DataCache,
) -> Result<MetricsReport> {
    let mut stores = ItemStores::default();
    if matches!(item_modality, Modality::Audio | Modality::Fused) {
        stores.audio = Some(embed_corpus(model, records, Modality::Audio, cache)?.0);
    }
    if matches!(item_modality, Modality::Symbolic | Modality::Fused) {
        stores.symbolic = Some(embed_corpus(model, records, Modality::Symbolic, cache)?.0);
    }
    Ok(evaluate(model, vocab, records, &stores, item_modality)?.0)
}

/// Reads `log.jsonl` back.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(step: usize, medr: f64) -> CheckpointMeta {
        CheckpointMeta {
            step,
            phase: Phase::Combined,
            val_medr: medr,
            val_recalls: [0.0; 3],
            path: PathBuf::new(),
        }
    }

    #[test]
    fn selection_rules() {
        let m = [meta(100, 30.0), meta(200, 10.0), meta(300, 12.0)];
        assert_eq!(select_checkpoint(&m).unwrap().step, 200);
        let m = [meta(100, 10.0), meta(200, 10.0)];
        assert_eq!(select_checkpoint(&m).unwrap().step, 100);
        let m = [meta(7, 4.5)];
        assert_eq!(select_checkpoint(&m).unwrap(), &m[0]);
        assert!(matches!(select_checkpoint(&[]), Err(Error::EmptyCheckpointList)));
    }

    #[test]
    fn final_checkpoint_uses_last_phase() {
        let mut a = meta(10, 1.0);
        a.phase = Phase::Pretrain;
        let mut b = meta(20, 5.0);
        b.phase = Phase::Finetune;
        let mut c = meta(30, 3.0);
        c.phase = Phase::Finetune;
        let all = [a.clone(), b, c];
        assert_eq!(final_checkpoint(&all).unwrap().step, 30);
        assert_eq!(final_checkpoint(&[a]).unwrap().step, 10);
    }

    #[test]
    fn config_rules() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.batch_size = 4;
        c.lr = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_serde_names() {
        let c: TrainConfig = serde_json::from_str(
            r#"{"strategy":"pt_ft","modality":"symbolic","pretrain":{"epochs":2},"finetune":{"steps":5}}"#,
        )
        .unwrap();
        assert_eq!(c.strategy, Strategy::PretrainFinetune);
        assert_eq!(c.mode, TrainMode::Symbolic);
        assert_eq!(c.pretrain.steps(130, 64), 6);
        assert_eq!(c.finetune.steps(130, 64), 5);
        assert_eq!(c.lr, 5e-5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn decay_groups_follow_mode() {
        let vocab = Vocab::from_pieces(&["a"]);
        let mut cfg = EncoderConfig::preset(Preset::Desk, vocab.len());
        cfg.symbolic.transformer.layers = 1;
        cfg.text.transformer.layers = 1;
        let model = TriModel::new(&cfg, 0).unwrap();
        let (d, p) = model.params.groups(TrainMode::Audio.trainable_prefixes());
        let ids: Vec<_> = d.iter().chain(&p).map(|v| v.id()).collect();
        for (name, var) in model.params.iter() {
            let expected = !name.starts_with("symbolic.");
            assert_eq!(ids.contains(&var.id()), expected, "{name}");
        }
        // temperature sits in the undecayed group
        let t = model.params.var(crate::contrastive::TEMPERATURE_PARAM).unwrap();
        assert!(p.iter().any(|v| v.id() == t.id()));
    }
}

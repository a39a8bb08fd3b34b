//! Audio, symbolic and text encoders projecting into one unit-norm joint space.

mod audio;
mod checkpoint;
pub(crate) mod conv;
pub mod nn;
mod norm;
mod transformer;

use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::MelSpectrogram;
use crate::contrastive::Temperature;
use crate::error::{Error, Result};
use crate::midi::{TokenSequence, BAR_VOCAB, DURATION_VOCAB, PITCH_VOCAB, POSITION_VOCAB};
use crate::text::TextTokenIds;

pub use audio::{AudioConfig, AudioEncoder};
pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use nn::{ParamStore, Precision};
pub use transformer::{
    SymbolicBatch, SymbolicConfig, SymbolicEncoder, TextBatch, TextConfig, TextEncoder,
    TransformerConfig,
};

pub const JOINT_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Symbolic,
    Text,
    Fused,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Symbolic => "symbolic",
            Modality::Text => "text",
            Modality::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "audio" => Some(Modality::Audio),
            "symbolic" | "midi" => Some(Modality::Symbolic),
            "text" => Some(Modality::Text),
            "fused" => Some(Modality::Fused),
            _ => None,
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Symbolic => 1,
            Modality::Text => 2,
            Modality::Fused => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Modality::Audio, Modality::Symbolic, Modality::Text, Modality::Fused]
            .get(c as usize)
            .copied()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A unit-norm vector in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding {
    pub vector: Vec<f32>,
    pub modality: Modality,
}

impl JointEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub audio: AudioConfig,
    pub symbolic: SymbolicConfig,
    pub text: TextConfig,
    pub joint_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size architecture (ResNet-34-like audio, 12 x 768 transformers).
    Paper,
    /// Under 10M parameters; trains on a laptop CPU.
    Desk,
}

const FIELD_VOCAB: [usize; 4] = [BAR_VOCAB, POSITION_VOCAB, PITCH_VOCAB, DURATION_VOCAB];

impl EncoderConfig {
    pub fn preset(preset: Preset, text_vocab_size: usize) -> Self {
        match preset {
            Preset::Paper => {
                let t = TransformerConfig {
                    layers: 12,
                    hidden_dim: 768,
                    heads: 12,
                    ff_dim: 3072,
                };
                Self {
                    audio: AudioConfig {
                        input_pool: 1,
                        stem_channels: 64,
                        block_widths: vec![64, 128, 256, 512],
                        blocks_per_stage: vec![3, 4, 6, 3],
                        blur_pool: true,
                        groups: 32,
                    },
                    symbolic: SymbolicConfig {
                        transformer: t.clone(),
                        field_vocab_sizes: FIELD_VOCAB,
                    },
                    text: TextConfig {
                        transformer: t,
                        vocab_size: text_vocab_size,
                    },
                    joint_dim: JOINT_DIM,
                }
            }
            Preset::Desk => {
                let t = TransformerConfig {
                    layers: 2,
                    hidden_dim: 128,
                    heads: 4,
                    ff_dim: 512,
                };
                Self {
                    audio: AudioConfig {
                        input_pool: 4,
                        stem_channels: 32,
                        block_widths: vec![32, 64, 128, 256],
                        blocks_per_stage: vec![1, 1, 1, 1],
                        blur_pool: true,
                        groups: 8,
                    },
                    symbolic: SymbolicConfig {
                        transformer: t.clone(),
                        field_vocab_sizes: FIELD_VOCAB,
                    },
                    text: TextConfig {
                        transformer: t,
                        vocab_size: text_vocab_size,
                    },
                    joint_dim: JOINT_DIM,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_dim == 0 {
            return Err(Error::Config("joint_dim must be positive".into()));
        }
        self.audio.validate()?;
        self.symbolic.validate()?;
        self.text.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    /// Parameter count of the whole model, from layer shapes alone.
    pub fn param_count(&self) -> usize {
        self.audio.param_count(self.joint_dim)
            + self.symbolic.param_count(self.joint_dim)
            + self.text.param_count(self.joint_dim)
            + 1
    }
}

/// Parameter-name prefixes owned by each trainable part.
pub fn prefixes(modality: Modality) -> &'static [&'static str] {
    match modality {
        Modality::Audio => &["audio."],
        Modality::Symbolic => &["symbolic."],
        Modality::Text => &["text."],
        Modality::Fused => &["audio.", "symbolic."],
    }
}

/// The three encoders, their projections and the shared temperature.
#[derive(Debug, Clone)]
pub struct TriModel {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub audio: AudioEncoder,
    pub symbolic: SymbolicEncoder,
    pub text: TextEncoder,
    pub temperature: Temperature,
    pub precision: Precision,
    pub device: Device,
}

impl TriModel {
    /// Freshly initialised f32 model; identical seeds give identical parameters.
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: &EncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = nn::Builder {
            store: &mut params,
            rng: &mut rng,
            dtype,
            device: device.clone(),
        };
        let audio = AudioEncoder::new(&mut b, &config.audio, config.joint_dim)?;
        let symbolic = SymbolicEncoder::new(&mut b, &config.symbolic, config.joint_dim)?;
        let text = TextEncoder::new(&mut b, &config.text, config.joint_dim)?;
        let temperature = Temperature::new(&mut b)?;
        Ok(Self {
            config: config.clone(),
            params,
            audio,
            symbolic,
            text,
            temperature,
            precision: Precision::Single,
            device,
        })
    }

    pub fn dtype(&self) -> DType {
        self.temperature.log_inv_tau().dtype()
    }

    pub fn audio_batch(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        Ok(AudioEncoder::batch(mels, &self.device)?.to_dtype(self.dtype())?)
    }

    pub fn symbolic_batch(&self, seqs: &[&TokenSequence]) -> Result<SymbolicBatch> {
        let b = SymbolicBatch::new(seqs, &self.device)?;
        Ok(SymbolicBatch {
            keep: b.keep.to_dtype(self.dtype())?,
            ids: b.ids,
        })
    }

    pub fn text_batch(&self, texts: &[&TextTokenIds]) -> Result<TextBatch> {
        let b = TextBatch::new(texts, &self.device)?;
        Ok(TextBatch {
            keep: b.keep.to_dtype(self.dtype())?,
            ids: b.ids,
        })
    }

    pub fn embed_audio(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        self.audio.forward(&self.audio_batch(mels)?, self.precision)
    }

    pub fn embed_symbolic(&self, seqs: &[&TokenSequence]) -> Result<Tensor> {
        self.symbolic.forward(&self.symbolic_batch(seqs)?, self.precision)
    }

    pub fn embed_text(&self, texts: &[&TextTokenIds]) -> Result<Tensor> {
        self.text.forward(&self.text_batch(texts)?, self.precision)
    }

    /// Single-item inference returning tagged embeddings.
    pub fn encode_audio(&self, mel: &MelSpectrogram) -> Result<JointEmbedding> {
        rows(&self.embed_audio(&[mel])?, Modality::Audio).map(|mut v| v.remove(0))
    }

    pub fn encode_symbolic(&self, seq: &TokenSequence) -> Result<JointEmbedding> {
        rows(&self.embed_symbolic(&[seq])?, Modality::Symbolic).map(|mut v| v.remove(0))
    }

    pub fn encode_text(&self, ids: &TextTokenIds) -> Result<JointEmbedding> {
        rows(&self.embed_text(&[ids])?, Modality::Text).map(|mut v| v.remove(0))
    }

    /// SHA-256 over the config and every parameter (name, shape, f32 bytes).
    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        h.update(self.config.to_json().as_bytes());
        for (name, (dims, values)) in self.params.to_host()? {
            h.update(name.as_bytes());
            for d in dims {
                h.update((d as u64).to_le_bytes());
            }
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().into())
    }

    /// Loads externally trained weights from a safetensors file into one
    /// encoder. Keys are relative to the encoder (e.g. `layer0.qkv.weight` for
    /// `text.layer0.qkv.weight`). Returns the number of tensors loaded.
    pub fn load_external_weights(&self, modality: Modality, path: impl AsRef<Path>) -> Result<usize> {
        let prefix = match modality {
            Modality::Audio | Modality::Symbolic | Modality::Text => modality.as_str(),
            Modality::Fused => {
                return Err(Error::Config("external weights target a single encoder".into()))
            }
        };
        let tensors = candle_core::safetensors::load(path.as_ref(), &self.device)?;
        let mut names: Vec<&String> = tensors.keys().collect();
        names.sort();
        for key in &names {
            self.params.assign(&format!("{prefix}.{key}"), &tensors[*key])?;
        }
        Ok(names.len())
    }
}

/// Splits a `[B, D]` tensor into tagged host vectors.
pub fn rows(t: &Tensor, modality: Modality) -> Result<Vec<JointEmbedding>> {
    Ok(t.to_dtype(DType::F32)?
        .to_vec2::<f32>()?
        .into_iter()
        .map(|vector| JointEmbedding { vector, modality })
        .collect())
}

#[cfg(test)]
mod tests;

//! Pre-norm transformer encoders for CP token sequences and text.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::nn::{l2_normalize, mm, Builder, Embedding, LayerNorm, Linear, Precision};
use crate::error::{Error, Result};
use crate::midi::{
    TokenSequence, BAR_VOCAB, DURATION_VOCAB, PITCH_VOCAB, POSITION_VOCAB, SEQUENCE_LEN,
};
use crate::text::{TextTokenIds, MAX_TEXT_TOKENS, PAD_ID};

/// Added to attention logits of masked keys.
const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl TransformerConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if [self.layers, self.hidden_dim, self.heads, self.ff_dim].contains(&0) {
            return Err(Error::Config(format!("{what}: dimensions must be positive")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!("{what}: hidden_dim not divisible by heads")));
        }
        Ok(())
    }

    /// Parameters in the layer stack plus the final norm.
    pub fn stack_params(&self) -> usize {
        let d = self.hidden_dim;
        let per_layer = 2 * d * 2
            + Linear::params(d, 3 * d, true)
            + Linear::params(d, d, true)
            + Linear::params(d, self.ff_dim, true)
            + Linear::params(self.ff_dim, d, true);
        self.layers * per_layer + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicConfig {
    #[serde(flatten)]
    pub transformer: TransformerConfig,
    /// Table sizes for bar, position, pitch, duration (each including PAD).
    pub field_vocab_sizes: [usize; 4],
}

impl SymbolicConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate("symbolic encoder")?;
        let needed = [BAR_VOCAB, POSITION_VOCAB, PITCH_VOCAB, DURATION_VOCAB];
        if self.field_vocab_sizes.iter().zip(&needed).any(|(have, need)| have < need) {
            return Err(Error::Config(format!(
                "field vocab sizes {:?} do not cover {needed:?}",
                self.field_vocab_sizes
            )));
        }
        Ok(())
    }

    pub fn param_count(&self, joint_dim: usize) -> usize {
        let d = self.transformer.hidden_dim;
        self.field_vocab_sizes.iter().sum::<usize>() * d
            + SEQUENCE_LEN * d
            + self.transformer.stack_params()
            + Linear::params(d, joint_dim, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    #[serde(flatten)]
    pub transformer: TransformerConfig,
    pub vocab_size: usize,
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate("text encoder")?;
        if self.vocab_size < 4 {
            return Err(Error::Config("text vocab must hold the reserved tokens".into()));
        }
        Ok(())
    }

    pub fn param_count(&self, joint_dim: usize) -> usize {
        let d = self.transformer.hidden_dim;
        (self.vocab_size + MAX_TEXT_TOKENS) * d
            + self.transformer.stack_params()
            + Linear::params(d, joint_dim, true)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    norm1: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl Layer {
    fn new(b: &mut Builder, name: &str, c: &TransformerConfig) -> Result<Self> {
        let d = c.hidden_dim;
        Ok(Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), d)?,
            qkv: Linear::new(b, &format!("{name}.qkv"), d, 3 * d, true)?,
            out: Linear::new(b, &format!("{name}.out"), d, d, true)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), d)?,
            ff1: Linear::new(b, &format!("{name}.ff1"), d, c.ff_dim, true)?,
            ff2: Linear::new(b, &format!("{name}.ff2"), c.ff_dim, d, true)?,
            heads: c.heads,
        })
    }

    /// `x: [B, L, D]`, `bias: [B, 1, 1, L]` additive key mask.
    fn forward(&self, x: &Tensor, bias: &Tensor, p: Precision) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(&self.norm1.forward(x)?, p)?
            .reshape((b, l, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (mm(&q, &k.t()?, p)? / (dh as f64).sqrt())?.broadcast_add(bias)?;
        let max = scores.max_keepdim(D::Minus1)?.detach();
        let e = scores.broadcast_sub(&max)?.exp()?;
        let attn = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
        let ctx = mm(&attn, &v, p)?.transpose(1, 2)?.reshape((b, l, d))?;
        let x = (x + self.out.forward(&ctx, p)?)?;
        let h = self.ff1.forward(&self.norm2.forward(&x)?, p)?.gelu_erf()?;
        Ok((&x + self.ff2.forward(&h, p)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stack {
    layers: Vec<Layer>,
    norm: LayerNorm,
}

impl Stack {
    fn new(b: &mut Builder, name: &str, c: &TransformerConfig) -> Result<Self> {
        let layers = (0..c.layers)
            .map(|i| Layer::new(b, &format!("{name}.layer{i}"), c))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(b, &format!("{name}.final_norm"), c.hidden_dim)?,
        })
    }

    /// `keep: [B, L]` with 1 for real tokens and 0 for PAD.
    fn forward(&self, x: &Tensor, keep: &Tensor, p: Precision) -> Result<Tensor> {
        let (b, l) = keep.dims2()?;
        let bias = ((keep - 1.0)? * -MASK_BIAS)?.reshape((b, 1, 1, l))?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, &bias, p)?;
        }
        self.norm.forward(&h)
    }
}

/// Mean over positions where `keep` is 1; all-masked rows pool to zero.
fn masked_mean(h: &Tensor, keep: &Tensor) -> Result<Tensor> {
    let k = keep.unsqueeze(2)?;
    let sum = h.broadcast_mul(&k)?.sum(1)?;
    let count = keep.sum_keepdim(1)?.maximum(1.0)?;
    Ok(sum.broadcast_div(&count)?)
}

/// A padded batch of CP sequences: per-field ids `[B, L, 4]` and keep mask `[B, L]`.
#[derive(Debug, Clone)]
pub struct SymbolicBatch {
    pub ids: Tensor,
    pub keep: Tensor,
}

impl SymbolicBatch {
    /// Trailing columns that are PAD in every row are dropped; attention and
    /// pooling ignore them, so this only saves work.
    pub fn new(seqs: &[&TokenSequence], device: &Device) -> Result<Self> {
        let rows: Vec<(Vec<[u32; 4]>, Vec<bool>)> = seqs
            .iter()
            .map(|s| {
                (
                    s.tokens().iter().map(|t| t.field_ids()).collect(),
                    s.pad_mask(),
                )
            })
            .collect();
        Self::from_fields(&rows, device)
    }

    /// Builds a batch from raw field ids and pad flags (true = PAD).
    pub fn from_fields(rows: &[(Vec<[u32; 4]>, Vec<bool>)], device: &Device) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("empty symbolic batch".into()));
        }
        let mut len = 1;
        for (ids, pad) in rows {
            if ids.len() != SEQUENCE_LEN || pad.len() != SEQUENCE_LEN {
                return Err(Error::Shape(format!(
                    "token sequence of length {} (expected {SEQUENCE_LEN})",
                    ids.len()
                )));
            }
            if let Some(last) = pad.iter().rposition(|&p| !p) {
                len = len.max(last + 1);
            }
        }
        let mut ids = Vec::with_capacity(rows.len() * len * 4);
        let mut keep = Vec::with_capacity(rows.len() * len);
        for (row_ids, pad) in rows {
            for i in 0..len {
                ids.extend_from_slice(&row_ids[i]);
                keep.push(if pad[i] { 0f32 } else { 1.0 });
            }
        }
        Ok(Self {
            ids: Tensor::from_vec(ids, (rows.len(), len, 4), device)?,
            keep: Tensor::from_vec(keep, (rows.len(), len), device)?,
        })
    }
}

/// A padded batch of text ids `[B, L]` with keep mask.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Tensor,
    pub keep: Tensor,
}

impl TextBatch {
    pub fn new(texts: &[&TextTokenIds], device: &Device) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Shape("empty text batch".into()));
        }
        let len = texts.iter().map(|t| t.ids.len()).max().unwrap_or(0).max(1);
        if len > MAX_TEXT_TOKENS {
            return Err(Error::Shape(format!("text of {len} tokens exceeds {MAX_TEXT_TOKENS}")));
        }
        let mut ids = Vec::with_capacity(texts.len() * len);
        let mut keep = Vec::with_capacity(texts.len() * len);
        for t in texts {
            for i in 0..len {
                let id = t.ids.get(i).copied().unwrap_or(PAD_ID);
                ids.push(id);
                keep.push(if id == PAD_ID { 0f32 } else { 1.0 });
            }
        }
        Ok(Self {
            ids: Tensor::from_vec(ids, (texts.len(), len), device)?,
            keep: Tensor::from_vec(keep, (texts.len(), len), device)?,
        })
    }
}

fn positions(l: usize, device: &Device) -> Result<Tensor> {
    Ok(Tensor::arange(0u32, l as u32, device)?)
}

#[derive(Debug, Clone)]
pub struct SymbolicEncoder {
    fields: [Embedding; 4],
    position: Embedding,
    stack: Stack,
    projection: Linear,
}

impl SymbolicEncoder {
    pub fn new(b: &mut Builder, c: &SymbolicConfig, joint_dim: usize) -> Result<Self> {
        c.validate()?;
        let d = c.transformer.hidden_dim;
        let names = ["bar", "position", "pitch", "duration"];
        let mut fields = Vec::new();
        for (name, &n) in names.iter().zip(&c.field_vocab_sizes) {
            fields.push(Embedding::new(b, &format!("symbolic.field.{name}"), n, d)?);
        }
        let fields: [Embedding; 4] = fields.try_into().expect("four fields");
        Ok(Self {
            fields,
            position: Embedding::new(b, "symbolic.position", SEQUENCE_LEN, d)?,
            stack: Stack::new(b, "symbolic", &c.transformer)?,
            projection: Linear::new(b, "symbolic.projection", d, joint_dim, true)?,
        })
    }

    /// Final-layer hidden states `[B, L, D]`.
    pub fn hidden_states(&self, batch: &SymbolicBatch, p: Precision) -> Result<Tensor> {
        let (_, l, _) = batch.ids.dims3()?;
        let mut x = self.position.forward(&positions(l, batch.ids.device())?)?.unsqueeze(0)?;
        for (f, table) in self.fields.iter().enumerate() {
            let ids = batch.ids.narrow(2, f, 1)?.squeeze(2)?.contiguous()?;
            x = table.forward(&ids)?.broadcast_add(&x)?;
        }
        self.stack.forward(&x, &batch.keep, p)
    }

    /// Mean of hidden states over real tokens, `[B, D]`.
    pub fn pooled(&self, batch: &SymbolicBatch, p: Precision) -> Result<Tensor> {
        masked_mean(&self.hidden_states(batch, p)?, &batch.keep)
    }

    pub fn forward(&self, batch: &SymbolicBatch, p: Precision) -> Result<Tensor> {
        let all_pad = batch.keep.sum(1)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        if let Some(i) = all_pad.iter().position(|&n| n == 0.0) {
            log::warn!("all-PAD token sequence at batch row {i}; embedding the zero state");
        }
        l2_normalize(&self.projection.forward(&self.pooled(batch, p)?, p)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    token: Embedding,
    position: Embedding,
    stack: Stack,
    projection: Linear,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, c: &TextConfig, joint_dim: usize) -> Result<Self> {
        c.validate()?;
        let d = c.transformer.hidden_dim;
        Ok(Self {
            token: Embedding::new(b, "text.token", c.vocab_size, d)?,
            position: Embedding::new(b, "text.position", MAX_TEXT_TOKENS, d)?,
            stack: Stack::new(b, "text", &c.transformer)?,
            projection: Linear::new(b, "text.projection", d, joint_dim, true)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token.table.dim(0).unwrap_or(0)
    }

    pub fn hidden_states(&self, batch: &TextBatch, p: Precision) -> Result<Tensor> {
        let (_, l) = batch.ids.dims2()?;
        let n = self.vocab_size() as u32;
        if batch.ids.flatten_all()?.to_vec1::<u32>()?.iter().any(|&id| id >= n) {
            return Err(Error::Shape(format!("text id outside vocabulary of {n}")));
        }
        let pos = self.position.forward(&positions(l, batch.ids.device())?)?.unsqueeze(0)?;
        let x = self.token.forward(&batch.ids)?.broadcast_add(&pos)?;
        self.stack.forward(&x, &batch.keep, p)
    }

    pub fn pooled(&self, batch: &TextBatch, p: Precision) -> Result<Tensor> {
        masked_mean(&self.hidden_states(batch, p)?, &batch.keep)
    }

    pub fn forward(&self, batch: &TextBatch, p: Precision) -> Result<Tensor> {
        l2_normalize(&self.projection.forward(&self.pooled(batch, p)?, p)?)
    }
}

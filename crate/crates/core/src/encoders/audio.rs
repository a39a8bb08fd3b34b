//! Residual convolutional encoder over log-mel spectrograms.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::nn::{blur_pool, l2_normalize, Builder, Conv2d, GroupNorm, Linear, Precision};
use crate::audio::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    /// Average-pooling factor applied to the mel before the stem (1 disables).
    pub input_pool: usize,
    pub stem_channels: usize,
    /// Output width of each of the four residual stages.
    pub block_widths: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks_per_stage: Vec<usize>,
    pub blur_pool: bool,
    pub groups: usize,
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_widths.len() != 4 || self.blocks_per_stage.len() != 4 {
            return Err(Error::Config("audio encoder needs exactly 4 stages".into()));
        }
        let dims = [self.input_pool, self.stem_channels, self.groups];
        if dims.iter().chain(&self.block_widths).chain(&self.blocks_per_stage).any(|&d| d == 0) {
            return Err(Error::Config("audio dimensions must be positive".into()));
        }
        if self.stem_channels % 2 != 0 {
            return Err(Error::Config("stem_channels must be even".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.block_widths[3]
    }

    fn groups_for(&self, channels: usize) -> usize {
        let mut g = self.groups.min(channels);
        while channels % g != 0 {
            g -= 1;
        }
        g
    }

    /// Parameter count, derived from the layer shapes.
    pub fn param_count(&self, joint_dim: usize) -> usize {
        let conv = Conv2d::params;
        let gn = |c: usize| 2 * c;
        let half = self.stem_channels / 2;
        let mut n = conv(1, half, 3) + gn(half);
        n += conv(half, half, 3) + gn(half);
        n += conv(half, self.stem_channels, 3) + gn(self.stem_channels);
        let mut inp = self.stem_channels;
        for (stage, (&w, &blocks)) in self.block_widths.iter().zip(&self.blocks_per_stage).enumerate() {
            for blk in 0..blocks {
                let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                n += conv(inp, w, 3) + gn(w) + conv(w, w, 3) + gn(w);
                if stride != 1 || inp != w {
                    n += conv(inp, w, 1) + gn(w);
                }
                inp = w;
            }
        }
        n + Linear::params(inp, joint_dim, true)
    }
}

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    fn new(b: &mut Builder, name: &str, inp: usize, out: usize, k: usize, stride: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, &format!("{name}.conv"), inp, out, k, stride)?,
            norm: GroupNorm::new(b, &format!("{name}.norm"), out, groups)?,
        })
    }

    fn forward(&self, x: &Tensor, p: Precision) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(x, p)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    first: ConvNorm,
    second: ConvNorm,
    shortcut: Option<ConvNorm>,
    /// Downsampling by blur pooling the block input rather than by conv stride.
    blur_down: bool,
}

impl Block {
    fn forward(&self, x: &Tensor, p: Precision) -> Result<Tensor> {
        // low-pass before subsampling; both branches then run at the reduced size
        let x = if self.blur_down { blur_pool(x)? } else { x.clone() };
        let h = self.first.forward(&x, p)?.relu()?;
        let h = self.second.forward(&h, p)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(&x, p)?,
            None => x,
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Averages non-overlapping `k x k` windows of a channel-first map.
fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let (c, b, h, w) = x.dims4()?;
    let (oh, ow) = (h / k, w / k);
    let x = x.narrow(2, 0, oh * k)?.narrow(3, 0, ow * k)?;
    Ok(x
        .reshape((c * b * oh, k, ow, k))?
        .mean(3)?
        .mean(1)?
        .reshape((c, b, oh, ow))?)
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    config: AudioConfig,
    stem: Vec<ConvNorm>,
    blocks: Vec<Block>,
    projection: Linear,
}

impl AudioEncoder {
    pub fn new(b: &mut Builder, config: &AudioConfig, joint_dim: usize) -> Result<Self> {
        config.validate()?;
        let half = config.stem_channels / 2;
        let g = |c| config.groups_for(c);
        let stem = vec![
            ConvNorm::new(b, "audio.stem.0", 1, half, 3, 2, g(half))?,
            ConvNorm::new(b, "audio.stem.1", half, half, 3, 1, g(half))?,
            ConvNorm::new(b, "audio.stem.2", half, config.stem_channels, 3, 1, g(config.stem_channels))?,
        ];
        let mut blocks = Vec::new();
        let mut inp = config.stem_channels;
        for (stage, (&w, &count)) in config.block_widths.iter().zip(&config.blocks_per_stage).enumerate() {
            for blk in 0..count {
                let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                let name = format!("audio.stage{stage}.{blk}");
                let conv_stride = if config.blur_pool { 1 } else { stride };
                let shortcut = if stride != 1 || inp != w {
                    Some(ConvNorm::new(b, &format!("{name}.shortcut"), inp, w, 1, conv_stride, g(w))?)
                } else {
                    None
                };
                blocks.push(Block {
                    first: ConvNorm::new(b, &format!("{name}.first"), inp, w, 3, conv_stride, g(w))?,
                    second: ConvNorm::new(b, &format!("{name}.second"), w, w, 3, 1, g(w))?,
                    shortcut,
                    blur_down: config.blur_pool && stride == 2,
                });
                inp = w;
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            projection: Linear::new(b, "audio.projection", inp, joint_dim, true)?,
        })
    }

    /// Stacks mels into `[B, 128, T]`; all must share a frame count.
    pub fn batch(mels: &[&MelSpectrogram], device: &Device) -> Result<Tensor> {
        let frames = mels
            .first()
            .map(|m| m.frames)
            .ok_or_else(|| Error::Shape("empty audio batch".into()))?;
        let mut data = Vec::with_capacity(mels.len() * N_MELS * frames);
        for m in mels {
            if m.frames != frames || m.values.len() != N_MELS * frames || frames == 0 {
                return Err(Error::Shape(format!(
                    "mel with {} frames in a batch of {frames}-frame mels",
                    m.frames
                )));
            }
            data.extend_from_slice(&m.values);
        }
        Ok(Tensor::from_vec(data, (mels.len(), N_MELS, frames), device)?)
    }

    /// Pooled features before projection, `[B, C]`.
    pub fn features(&self, mel: &Tensor, p: Precision) -> Result<Tensor> {
        let (b, bands, frames) = mel.dims3()?;
        if bands != N_MELS {
            return Err(Error::Shape(format!("expected {N_MELS} mel bands, got {bands}")));
        }
        // per-example standardization over the whole spectrogram
        let flat = mel.reshape((b, bands * frames))?;
        let mean = flat.mean_keepdim(1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let std = centered.sqr()?.mean_keepdim(1)?.sqrt()?;
        let x = centered.broadcast_div(&(std + 1e-5)?)?.reshape((b, bands, frames))?;

        // pad time so every stride divides it
        let unit = self.config.input_pool * 32;
        let target = frames.div_ceil(unit) * unit;
        let x = x.pad_with_zeros(2, 0, target - frames)?.unsqueeze(0)?;

        let mut h = avg_pool(&x, self.config.input_pool)?;
        for layer in &self.stem {
            h = layer.forward(&h, p)?.relu()?;
        }
        h = avg_pool(&h, 2)?;
        for blk in &self.blocks {
            h = blk.forward(&h, p)?;
        }
        let (c, b, hh, ww) = h.dims4()?;
        Ok(h.reshape((c, b, hh * ww))?.mean(D::Minus1)?.t()?)
    }

    /// Unit-norm joint embeddings `[B, joint_dim]`.
    pub fn forward(&self, mel: &Tensor, p: Precision) -> Result<Tensor> {
        let f = self.features(mel, p)?;
        l2_normalize(&self.projection.forward(&f, p)?)
    }
}

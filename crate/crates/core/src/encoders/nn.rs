//! Parameter storage and the handful of layers the encoders need.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{conv, norm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Single,
    /// Matmuls in f16, everything else in f32.
    Mixed,
}

/// Matrix product, optionally in half precision.
pub(crate) fn mm(a: &Tensor, b: &Tensor, precision: Precision) -> Result<Tensor> {
    Ok(match precision {
        Precision::Single => a.matmul(b)?,
        Precision::Mixed => {
            let dt = a.dtype();
            a.to_dtype(DType::F16)?
                .matmul(&b.to_dtype(DType::F16)?)?
                .to_dtype(dt)?
        }
    })
}

#[derive(Debug, Clone)]
struct Param {
    var: Var,
    decay: bool,
}

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, t: Tensor, decay: bool) -> Result<Tensor> {
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name, Param { var, decay });
        Ok(out)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.params.get(name).map(|p| &p.var)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.var))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }

    /// Vars under `prefixes`, split into (decayed, not decayed).
    pub fn groups(&self, prefixes: &[&str]) -> (Vec<Var>, Vec<Var>) {
        let mut decay = Vec::new();
        let mut plain = Vec::new();
        for (k, p) in &self.params {
            if prefixes.iter().any(|pre| k.starts_with(pre)) {
                if p.decay {
                    decay.push(p.var.clone());
                } else {
                    plain.push(p.var.clone());
                }
            }
        }
        (decay, plain)
    }

    pub fn is_decayed(&self, name: &str) -> Option<bool> {
        self.params.get(name).map(|p| p.decay)
    }

    /// Copies values into existing parameters; names and shapes must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, found {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(p.var.dtype())?)?;
        Ok(())
    }

    /// Host copy of every parameter as f32.
    pub fn to_host(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.params
            .iter()
            .map(|(k, p)| {
                let t = p.var.as_tensor();
                let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((k.clone(), (t.dims().to_vec(), v)))
            })
            .collect()
    }
}

/// Seeded initializers writing into a [`ParamStore`].
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Builder<'_> {
    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?
            .to_dtype(self.dtype)?
            .to_device(&self.device)?)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, decay: bool) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let t = self.tensor(data, shape)?;
        self.store.insert(name.to_string(), t, decay)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        let t = self.tensor(data, shape)?;
        self.store.insert(name.to_string(), t, decay)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, decay: bool) -> Result<Tensor> {
        let n = shape.iter().product();
        let t = self.tensor(vec![value; n], shape)?;
        self.store.insert(name.to_string(), t, decay)
    }
}

/// `y = x W^T + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Kaiming-uniform weights with fan-in bounded bias.
    pub fn new(b: &mut Builder, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = b.uniform(&format!("{name}.weight"), &[out, inp], bound, true)?;
        let bias = if bias {
            Some(b.uniform(&format!("{name}.bias"), &[out], bound, false)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn params(inp: usize, out: usize, bias: bool) -> usize {
        inp * out + if bias { out } else { 0 }
    }

    pub fn forward(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = mm(&x.reshape((rows, inp))?, &self.weight.t()?, precision)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(b: &mut Builder, name: &str, n: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.normal(&format!("{name}.weight"), &[n, dim], 0.02, true)?,
        })
    }

    /// Looks up an integer id tensor of any shape; appends the embedding dim.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let out = self.table.index_select(&flat, 0)?;
        dims.push(self.table.dim(1)?);
        Ok(out.reshape(dims)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: b.constant(&format!("{name}.gain"), &[dim], 1.0, false)?,
            bias: b.constant(&format!("{name}.bias"), &[dim], 0.0, false)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = norm::standardize_rows(x, self.eps)?;
        Ok(y.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization for channel-first `[C, B, H, W]` maps.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            gain: b.constant(&format!("{name}.gain"), &[channels, 1, 1, 1], 1.0, false)?,
            bias: b.constant(&format!("{name}.bias"), &[channels, 1, 1, 1], 0.0, false)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = norm::standardize_groups(x, self.groups, self.eps)?;
        Ok(y.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Bias-free square convolution over channel-first maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in * k * k]`
    pub weight: Tensor,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        name: &str,
        inp: usize,
        out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = inp * k * k;
        // He-normal for ReLU networks
        let std = (2.0 / fan_in as f64).sqrt();
        Ok(Self {
            weight: b.normal(&format!("{name}.weight"), &[out, fan_in], std, true)?,
            k,
            stride,
            pad: k / 2,
        })
    }

    pub fn params(inp: usize, out: usize, k: usize) -> usize {
        inp * out * k * k
    }

    pub fn forward(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        let (_, b, h, w) = x.dims4()?;
        let out_h = (h + 2 * self.pad - self.k) / self.stride + 1;
        let out_w = (w + 2 * self.pad - self.k) / self.stride + 1;
        let cols = conv::patches(x, self.k, self.stride, self.pad)?;
        let y = mm(&self.weight, &cols, precision)?;
        Ok(y.reshape((self.weight.dim(0)?, b, out_h, out_w))?)
    }
}

/// Anti-aliased downsampling by 2: separable [1, 2, 1] / 4 blur, then subsample.
pub fn blur_pool(x: &Tensor) -> Result<Tensor> {
    let (c, b, h, w) = x.dims4()?;
    let blur = |t: &Tensor, dim: usize, len: usize| -> Result<Tensor> {
        if len == 1 {
            return Ok(t.clone());
        }
        // reflect-pad by one on both sides
        let first = t.narrow(dim, 1, 1)?;
        let last = t.narrow(dim, len - 2, 1)?;
        let p = Tensor::cat(&[&first, t, &last], dim)?;
        let left = p.narrow(dim, 0, len)?;
        let mid = p.narrow(dim, 1, len)?;
        let right = p.narrow(dim, 2, len)?;
        Ok(((left + right)? * 0.25)?.add(&(mid * 0.5)?)?)
    };
    let y = blur(&blur(x, 2, h)?, 3, w)?;
    subsample2(&y, c, b, h, w)
}

/// Keeps every other row and column, starting from the first.
pub fn subsample2(x: &Tensor, c: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let x = if h % 2 == 1 || w % 2 == 1 {
        x.pad_with_zeros(2, 0, h % 2)?.pad_with_zeros(3, 0, w % 2)?
    } else {
        x.clone()
    };
    let y = x
        .reshape((c * b * oh, 2, ow, 2))?
        .narrow(1, 0, 1)?
        .narrow(3, 0, 1)?;
    Ok(y.reshape((c, b, oh, ow))?)
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

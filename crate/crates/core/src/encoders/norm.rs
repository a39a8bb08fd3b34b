//! Fused standardization (zero mean, unit variance) with a hand-written
//! backward pass, shared by layer norm and group norm.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Result, Shape, Tensor, WithDType};

/// Which elements share statistics.
#[derive(Debug, Clone, Copy)]
enum Grouping {
    /// Contiguous rows of the given length.
    Rows(usize),
    /// Channel-first `[C, B, H*W]`, `groups` channel groups per batch item.
    Channels { c: usize, b: usize, hw: usize, groups: usize },
}

impl Grouping {
    /// Visits each statistic group as a list of contiguous ranges.
    fn visit(&self, total: usize, mut f: impl FnMut(&[(usize, usize)])) {
        match *self {
            Grouping::Rows(d) => {
                for start in (0..total).step_by(d) {
                    f(&[(start, start + d)]);
                }
            }
            Grouping::Channels { c, b, hw, groups } => {
                let per = c / groups;
                let mut ranges = Vec::with_capacity(per);
                for g in 0..groups {
                    for bi in 0..b {
                        ranges.clear();
                        for ch in g * per..(g + 1) * per {
                            let s = (ch * b + bi) * hw;
                            ranges.push((s, s + hw));
                        }
                        f(&ranges);
                    }
                }
            }
        }
    }
}

fn stats<T: WithDType>(x: &[T], ranges: &[(usize, usize)], eps: f64) -> (T, T) {
    let n: usize = ranges.iter().map(|r| r.1 - r.0).sum();
    let mut sum = 0f64;
    for &(a, b) in ranges {
        sum += x[a..b].iter().map(|v| v.to_f64()).sum::<f64>();
    }
    let mean = sum / n as f64;
    let mut sq = 0f64;
    for &(a, b) in ranges {
        sq += x[a..b].iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>();
    }
    let inv_std = 1.0 / (sq / n as f64 + eps).sqrt();
    (T::from_f64(mean), T::from_f64(inv_std))
}

fn forward<T: WithDType>(x: &[T], g: Grouping, eps: f64) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    g.visit(x.len(), |ranges| {
        let (mean, inv) = stats(x, ranges, eps);
        for &(a, b) in ranges {
            for i in a..b {
                y[i] = (x[i] - mean) * inv;
            }
        }
    });
    y
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))` per group.
fn backward<T: WithDType>(x: &[T], y: &[T], dy: &[T], g: Grouping, eps: f64) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    g.visit(x.len(), |ranges| {
        let (_, inv) = stats(x, ranges, eps);
        let n: usize = ranges.iter().map(|r| r.1 - r.0).sum();
        let (mut s1, mut s2) = (0f64, 0f64);
        for &(a, b) in ranges {
            for i in a..b {
                s1 += dy[i].to_f64();
                s2 += (dy[i] * y[i]).to_f64();
            }
        }
        let m1 = T::from_f64(s1 / n as f64);
        let m2 = T::from_f64(s2 / n as f64);
        for &(a, b) in ranges {
            for i in a..b {
                dx[i] = inv * (dy[i] - m1 - y[i] * m2);
            }
        }
    });
    dx
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("standardize expects contiguous input"),
    }
}

struct Standardize {
    grouping: Grouping,
    eps: f64,
}

struct StandardizeGrad {
    grouping: Grouping,
    eps: f64,
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(forward(contiguous(v, l)?, self.grouping, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(forward(contiguous(v, l)?, self.grouping, self.eps)),
            _ => candle_core::bail!("standardize supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let op = StandardizeGrad {
            grouping: self.grouping,
            eps: self.eps,
        };
        Ok(Some(arg.apply_op3_no_bwd(res, &grad.contiguous()?, &op)?))
    }
}

impl CustomOp3 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "standardize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (g, e) = (self.grouping, self.eps);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(y), CpuStorage::F32(dy)) => CpuStorage::F32(backward(
                contiguous(x, l1)?,
                contiguous(y, l2)?,
                contiguous(dy, l3)?,
                g,
                e,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(y), CpuStorage::F64(dy)) => CpuStorage::F64(backward(
                contiguous(x, l1)?,
                contiguous(y, l2)?,
                contiguous(dy, l3)?,
                g,
                e,
            )),
            _ => candle_core::bail!("standardize-grad: mismatched or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Standardizes each row over the last dimension.
pub(crate) fn standardize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.dim(candle_core::D::Minus1)?;
    x.contiguous()?.apply_op1(Standardize {
        grouping: Grouping::Rows(d),
        eps,
    })
}

/// Standardizes a channel-first `[C, B, H, W]` map per (channel group, item).
pub(crate) fn standardize_groups(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (c, b, h, w) = x.dims4()?;
    x.contiguous()?.apply_op1(Standardize {
        grouping: Grouping::Channels {
            c,
            b,
            hw: h * w,
            groups,
        },
        eps,
    })
}

//! 2-D convolution as im2col + matmul in channel-first `[C, B, H, W]` layout.
//!
//! candle's CPU conv backward is slow and rejects some odd shapes, so the
//! patch extraction is a custom op with its own adjoint (col2im).

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.b * self.out_h() * self.out_w()
    }

    /// Calls `f(col_index, input_index)` for every in-bounds patch element of row `(c, ky, kx)`.
    #[inline]
    fn for_each<F: FnMut(usize, usize)>(&self, c: usize, ky: usize, kx: usize, mut f: F) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for bi in 0..self.b {
            let plane = (c * self.b + bi) * self.h * self.w;
            let col_base = bi * oh * ow;
            for oy in 0..oh {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                let row = plane + iy as usize * self.w;
                for ox in 0..ow {
                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                    if ix >= 0 && (ix as usize) < self.w {
                        f(col_base + oy * ow + ox, row + ix as usize);
                    }
                }
            }
        }
    }
}

fn im2col<T: WithDType>(x: &[T], g: Geometry) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); g.rows() * n];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[r * n..(r + 1) * n];
                g.for_each(c, ky, kx, |col, src| dst[col] = x[src]);
            }
        }
    }
    out
}

fn col2im<T: WithDType>(cols: &[T], g: Geometry) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); g.c * g.b * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &cols[r * n..(r + 1) * n];
                g.for_each(c, ky, kx, |col, dst| out[dst] += src[col]);
            }
        }
    }
    out
}

struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

struct Col2Im(Geometry);

fn slice<'a, T>(v: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous tensor".into())),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (c, b, h, w) = l.shape().dims4()?;
        let g = Geometry {
            c,
            b,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(slice(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(slice(v, l)?, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let (c, b, h, w) = arg.dims4()?;
        let g = Geometry {
            c,
            b,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(g))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.c, g.b, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(slice(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(slice(v, l)?, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}

/// Patch matrix `[C*k*k, B*OH*OW]` of a `[C, B, H, W]` input.
pub(crate) fn patches(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if k == 1 && stride == 1 && pad == 0 {
        let (c, b, h, w) = x.dims4()?;
        return x.reshape((c, b * h * w));
    }
    x.contiguous()?.apply_op1(Im2Col { k, stride, pad })
}

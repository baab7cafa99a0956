//! 2-D convolution as im2col followed by a matrix product.
//!
//! The unfold and its adjoint (fold) are custom ops with mutual backward
//! passes, so gradients for both input and weight come from the matmul.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_len(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kj`.
    fn x_range(&self, kj: usize) -> (usize, usize) {
        let (p, s) = (self.padding as isize, self.stride as isize);
        let ow = self.out_width() as isize;
        let off = kj as isize - p;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((self.width as isize - 1 - off) / s + 1).clamp(0, ow);
        (lo.min(hi) as usize, hi as usize)
    }

    /// Calls `f(col_offset, image_offset, len)` for every run of valid taps
    /// of one sample. Runs are contiguous in the image only when stride is 1.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let l = oh * ow;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let (lo, hi) = self.x_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    for y in 0..oh {
                        let iy = (y * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let ix = lo * self.stride + kj - self.padding;
                        f(
                            row * l + y * ow + lo,
                            (c * self.height + iy as usize) * self.width + ix,
                            hi - lo,
                        );
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv ops expect contiguous input"),
    }
}

fn unfold<T: WithDType>(src: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let per_in = g.channels * g.height * g.width;
    let per_col = g.col_rows() * g.col_len();
    let mut out = vec![T::zero(); batch * per_col];
    for b in 0..batch {
        let s = &src[b * per_in..(b + 1) * per_in];
        let o = &mut out[b * per_col..(b + 1) * per_col];
        let st = g.stride;
        g.for_each_run(|co, io, n| {
            let dst = &mut o[co..co + n];
            if st == 1 {
                dst.copy_from_slice(&s[io..io + n]);
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = s[io + i * st];
                }
            }
        });
    }
    out
}

fn fold<T: WithDType>(src: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let per_in = g.channels * g.height * g.width;
    let per_col = g.col_rows() * g.col_len();
    let mut out = vec![T::zero(); batch * per_in];
    for b in 0..batch {
        let s = &src[b * per_col..(b + 1) * per_col];
        let o = &mut out[b * per_in..(b + 1) * per_in];
        let st = g.stride;
        g.for_each_run(|co, io, n| {
            for (i, &v) in s[co..co + n].iter().enumerate() {
                o[io + i * st] += v;
            }
        });
    }
    out
}

/// `(B, C, H, W) -> (B, C*k*k, Ho*Wo)`
struct Unfold(ConvGeometry);
/// `(B, C*k*k, Ho*Wo) -> (B, C, H, W)`, summing overlapping taps.
struct Fold(ConvGeometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.col_rows(), g.col_len()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, layout)?, batch, g)),
            _ => candle_core::bail!("unfold supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, layout)?, batch, g)),
            _ => candle_core::bail!("fold supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Unfold(self.0))?))
    }
}

/// Convolution of `x: (B, C, H, W)` with `weight: (O, C, k, k)`, no bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        candle_core::bail!("conv weight {:?} does not match input {:?}", weight.dims(), x.dims());
    }
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    let (oh, ow) = (g.out_height(), g.out_width());
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.reshape((b, c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Unfold(g))?
    };
    let w2 = weight.reshape((o, c * k * k))?;
    w2.broadcast_left(b)?.contiguous()?.matmul(&cols)?.reshape((b, o, oh, ow))
}

//! Differentiable tensor ops missing from (or slow in) candle's CPU backend.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kh) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kw) / self.stride.1 + 1,
        )
    }
}

/// Unfolds `(B, C, H, W)` into columns `(C*kh*kw, B*Ho*Wo)`.
struct Im2Col {
    geo: ConvGeometry,
    dims: (usize, usize, usize, usize),
}

/// Valid output columns `[lo, hi)` for kernel offset `k` along one axis.
fn valid_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < n_out && ((lo * stride + k) as isize - (pad as isize)) < 0 {
        lo += 1;
    }
    let mut hi = n_out;
    while hi > lo && ((hi - 1) * stride + k) as isize - pad as isize >= n_in as isize {
        hi -= 1;
    }
    (lo, hi)
}

impl Im2Col {
    fn unfold<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let (b, c, h, w) = self.dims;
        let g = self.geo;
        let (ho, wo) = g.out_hw(h, w);
        let n = ho * wo;
        let mut dst = vec![T::default(); c * g.kh * g.kw * b * n];
        for ci in 0..c {
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(ky, g.pad.0, g.stride.0, h, ho);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(kx, g.pad.1, g.stride.1, w, wo);
                    let row = (ci * g.kh + ky) * g.kw + kx;
                    for bi in 0..b {
                        let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        let out = &mut dst[row * b * n + bi * n..row * b * n + (bi + 1) * n];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride.0 + ky - g.pad.0;
                            let src_row = &plane[iy * w..(iy + 1) * w];
                            let out_row = &mut out[oy * wo..(oy + 1) * wo];
                            if g.stride.1 == 1 {
                                let ix0 = ox_lo + kx - g.pad.1;
                                out_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] = src_row[ox * g.stride.1 + kx - g.pad.1];
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let (b, c, h, w) = self.dims;
        let g = self.geo;
        let (ho, wo) = g.out_hw(h, w);
        let n = ho * wo;
        let mut dst = vec![T::default(); b * c * h * w];
        for ci in 0..c {
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(ky, g.pad.0, g.stride.0, h, ho);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(kx, g.pad.1, g.stride.1, w, wo);
                    let row = (ci * g.kh + ky) * g.kw + kx;
                    for bi in 0..b {
                        let src = &cols[row * b * n + bi * n..row * b * n + (bi + 1) * n];
                        let plane = &mut dst[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride.0 + ky - g.pad.0;
                            let src_row = &src[oy * wo + ox_lo..oy * wo + ox_hi];
                            let ix0 = ox_lo * g.stride.1 + kx - g.pad.1;
                            let dst_row = &mut plane[iy * w + ix0..(iy + 1) * w];
                            for (d, &v) in dst_row.iter_mut().step_by(g.stride.1).zip(src_row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        dst
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        if !layout.is_contiguous() {
            candle_core::bail!("im2col expects a contiguous input");
        }
        let (b, c, h, w) = self.dims;
        let (ho, wo) = self.geo.out_hw(h, w);
        let shape = Shape::from((c * self.geo.kh * self.geo.kw, b * ho * wo));
        let start = layout.start_offset();
        let len = b * c * h * w;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold(&v[start..start + len])),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold(&v[start..start + len])),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.flatten_all()?;
        let dims = arg.dims();
        let out = match g.dtype() {
            DType::F32 => Tensor::from_vec(self.fold(&g.to_vec1::<f32>()?), dims, arg.device())?,
            DType::F64 => Tensor::from_vec(self.fold(&g.to_vec1::<f64>()?), dims, arg.device())?,
            dt => candle_core::bail!("im2col backward: unsupported dtype {dt:?}"),
        };
        Ok(Some(out))
    }
}

/// 2-D cross-correlation, `(B, Cin, H, W) * (Cout, Cin, kh, kw)`, via im2col and one GEMM.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Result<Tensor> {
    conv2d_bias(x, weight, None, stride, pad)
}

/// [`conv2d`] with an optional per-channel bias, added before the output is transposed back.
pub fn conv2d_bias(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return Err(shape_err!("conv2d: input has {c} channels, kernel expects {ci}"));
    }
    if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
        return Err(shape_err!("conv2d: {h}x{w} input too small for {kh}x{kw} kernel"));
    }
    let geo = ConvGeometry { kh, kw, stride, pad };
    let (ho, wo) = geo.out_hw(h, w);
    let cols = x.contiguous()?.apply_op1(Im2Col { geo, dims: (b, c, h, w) })?;
    let mut out = weight.reshape((co, ci * kh * kw))?.matmul(&cols)?;
    if let Some(b) = bias {
        // (co, B*Ho*Wo) layout: the bias gradient is a contiguous last-axis sum
        out = out.broadcast_add(&b.reshape((co, 1))?)?;
    }
    Ok(out.reshape((co, b, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

/// `(B, C*r*r, H, W) -> (B, C, H*r, W*r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(shape_err!("pixel_shuffle: {c} channels not divisible by {}", r * r));
    }
    let oc = c / (r * r);
    Ok(x
        .reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

/// Per-sample, per-channel normalization over the spatial axes.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Average-pools by the integer factor mapping `x` onto `(h, w)`.
pub fn downsample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    if xh % h != 0 || xw % w != 0 || xh / h != xw / w {
        return Err(shape_err!("cannot downsample {xh}x{xw} to {h}x{w} by an integer factor"));
    }
    let f = xh / h;
    Ok(x.avg_pool2d(f)?)
}

use candle_core::{DType, Tensor};

use crate::error::{shape_err, Result};
use crate::nn::ops;

/// Weight floor added after the sigmoid so weights never reach zero.
pub const WEIGHT_EPS: f64 = 1e-6;

/// Per-reference displacement field and blend weight.
///
/// `offsets` is `(B, 2, H, W)` in pixels (channel 0 = x, 1 = y);
/// `weight` is `(B, 1, H, W)` and strictly positive.
#[derive(Debug, Clone)]
pub struct MotionField {
    pub offsets: Tensor,
    pub weight: Tensor,
}

impl MotionField {
    /// From raw network output `(B, 3, H, W)`: two offset channels and a weight logit.
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        let c = raw.dim(1)?;
        if c != 3 {
            return Err(shape_err!("motion head must output 3 channels, got {c}"));
        }
        Ok(Self {
            offsets: raw.narrow(1, 0, 2)?,
            weight: (ops::sigmoid(&raw.narrow(1, 2, 1)?)? + WEIGHT_EPS)?,
        })
    }

    pub fn zeros(b: usize, h: usize, w: usize, dtype: DType) -> Result<Self> {
        let dev = candle_core::Device::Cpu;
        Ok(Self {
            offsets: Tensor::zeros((b, 2, h, w), dtype, &dev)?,
            weight: Tensor::ones((b, 1, h, w), dtype, &dev)?,
        })
    }

    /// Resamples to `(h, w)`; offsets are divided by the scale factor so they stay in pixels of the new grid.
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        let (_, _, fh, _) = self.offsets.dims4()?;
        if fh == h && self.offsets.dim(3)? == w {
            return Ok(self.clone());
        }
        let factor = (fh / h) as f64;
        Ok(Self {
            offsets: (ops::downsample_to(&self.offsets, h, w)? / factor)?,
            weight: ops::downsample_to(&self.weight, h, w)?,
        })
    }
}

/// `out(p) = bilinear(input, p + offset(p))` with border replication.
///
/// `input` is `(B, C, h, w)`; `offsets` is `(B, 2, h, w)` in pixels.
/// Differentiable in both arguments (the integer cell is chosen on detached positions).
pub fn warp(input: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (bo, co, ho, wo) = offsets.dims4()?;
    if (bo, co, ho, wo) != (b, 2, h, w) {
        return Err(shape_err!("warp: offsets {:?} do not match input {:?}", offsets.dims(), input.dims()));
    }
    let dev = input.device();
    let dtype = input.dtype();
    let gx = Tensor::arange(0u32, w as u32, dev)?.to_dtype(dtype)?.reshape((1, 1, w))?;
    let gy = Tensor::arange(0u32, h as u32, dev)?.to_dtype(dtype)?.reshape((1, h, 1))?;
    let px = offsets.narrow(1, 0, 1)?.squeeze(1)?.broadcast_add(&gx)?.clamp(0.0, (w - 1) as f64)?;
    let py = offsets.narrow(1, 1, 1)?.squeeze(1)?.broadcast_add(&gy)?.clamp(0.0, (h - 1) as f64)?;

    let cell = |p: &Tensor, n: usize| -> Result<Tensor> {
        Ok(p.detach().floor()?.clamp(0.0, n.saturating_sub(2) as f64)?)
    };
    let x0 = cell(&px, w)?;
    let y0 = cell(&py, h)?;
    let fx = (&px - &x0)?;
    let fy = (&py - &y0)?;
    let x0i = x0.to_dtype(DType::U32)?;
    let y0i = y0.to_dtype(DType::U32)?;
    let step_x = if w > 1 { 1.0 } else { 0.0 };
    let step_y = if h > 1 { 1.0 } else { 0.0 };
    let x1i = (x0 + step_x)?.to_dtype(DType::U32)?;
    let y1i = (y0 + step_y)?.to_dtype(DType::U32)?;

    let flat = input.reshape((b, c, h * w))?;
    let w_t = Tensor::new(w as u32, dev)?;
    let sample = |yi: &Tensor, xi: &Tensor| -> Result<Tensor> {
        let idx = yi.broadcast_mul(&w_t)?.add(xi)?.reshape((b, 1, h * w))?;
        let idx = idx.broadcast_as((b, c, h * w))?.contiguous()?;
        Ok(flat.gather(&idx, 2)?.reshape((b, c, h, w))?)
    };
    let v00 = sample(&y0i, &x0i)?;
    let v01 = sample(&y0i, &x1i)?;
    let v10 = sample(&y1i, &x0i)?;
    let v11 = sample(&y1i, &x1i)?;
    let fx = fx.unsqueeze(1)?;
    let fy = fy.unsqueeze(1)?;
    let gx_ = (1.0 - &fx)?;
    let top = (v00.broadcast_mul(&gx_)? + v01.broadcast_mul(&fx)?)?;
    let bottom = (v10.broadcast_mul(&gx_)? + v11.broadcast_mul(&fx)?)?;
    Ok((top.broadcast_mul(&(1.0 - &fy)?)? + bottom.broadcast_mul(&fy)?)?)
}

/// Pixel-wise `sum_i w_i x_i / sum_i w_i`.
pub fn aggregate(items: &[Tensor], weights: &[Tensor]) -> Result<Tensor> {
    if items.is_empty() || items.len() != weights.len() {
        return Err(shape_err!("aggregate: {} items vs {} weights", items.len(), weights.len()));
    }
    let mut num = items[0].broadcast_mul(&weights[0])?;
    let mut den = weights[0].clone();
    for (x, wt) in items.iter().zip(weights).skip(1) {
        num = (num + x.broadcast_mul(wt)?)?;
        den = (den + wt)?;
    }
    Ok(num.broadcast_div(&den)?)
}

/// Same as [`aggregate`] for stacked tensors `(B, N, C, h, w)` / `(B, N, 1, h, w)`.
pub fn aggregate_stacked(items: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let num = items.broadcast_mul(weights)?.sum(1)?;
    Ok(num.broadcast_div(&weights.sum(1)?)?)
}

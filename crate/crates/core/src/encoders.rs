//! Audio and landmark encoders producing `d`-dimensional embeddings.

use candle_core::Tensor;

use crate::audio::{CHUNK_STEPS, N_MELS};
use crate::error::{shape_err, Result};
use crate::nn::{layers::silu, Conv1d, Conv2d, Linear, ParamStore};

/// Strided 2-D conv stack over a `16 x 80` Mel chunk.
///
/// Spatial path: 16x80 -> 8x40 -> 4x20 -> 2x10 -> 1x5, then a linear map to `d`.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    stem: Conv2d,
    down: Vec<Conv2d>,
    proj: Linear,
    d: usize,
}

impl AudioEncoder {
    pub fn new(width: usize, d: usize, zero_output: bool, ps: &ParamStore) -> Result<Self> {
        let chans = [width, width, 2 * width, 4 * width, 4 * width];
        let stem = Conv2d::new(1, chans[0], 3, 1, &ps.pp("stem"))?;
        let down = (0..4)
            .map(|i| Conv2d::new(chans[i], chans[i + 1], 3, 2, &ps.pp(format!("down{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let flat = chans[4] * 5;
        let proj = if zero_output {
            Linear::zeroed(flat, d, &ps.pp("proj"))?
        } else {
            Linear::new(flat, d, &ps.pp("proj"))?
        };
        Ok(Self { stem, down, proj, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `(B, 16, 80) -> (B, d)`.
    pub fn forward(&self, chunks: &Tensor) -> Result<Tensor> {
        let (b, h, w) = chunks.dims3()?;
        if (h, w) != (CHUNK_STEPS, N_MELS) {
            return Err(shape_err!("audio encoder expects {CHUNK_STEPS}x{N_MELS} chunks, got {h}x{w}"));
        }
        let mut x = silu(&self.stem.forward(&chunks.reshape((b, 1, h, w))?)?)?;
        for conv in &self.down {
            x = silu(&conv.forward(&x)?)?;
        }
        self.proj.forward(&x.flatten_from(1)?)
    }
}

/// 1-D convs along the point axis of `(x, y)` channels, average-pooled and projected to `d`.
#[derive(Debug, Clone)]
pub struct LandmarkEncoder {
    convs: Vec<Conv1d>,
    proj: Linear,
    points: usize,
}

impl LandmarkEncoder {
    pub fn new(points: usize, width: usize, d: usize, zero_output: bool, ps: &ParamStore) -> Result<Self> {
        let convs = vec![
            Conv1d::new(2, width, 3, 1, &ps.pp("conv0"))?,
            Conv1d::new(width, width, 3, 2, &ps.pp("conv1"))?,
            Conv1d::new(width, 2 * width, 3, 2, &ps.pp("conv2"))?,
        ];
        let proj = if zero_output {
            Linear::zeroed(2 * width, d, &ps.pp("proj"))?
        } else {
            Linear::new(2 * width, d, &ps.pp("proj"))?
        };
        Ok(Self { convs, proj, points })
    }

    /// `(B, n, 2) -> (B, d)`.
    pub fn forward(&self, points: &Tensor) -> Result<Tensor> {
        let (_, n, c) = points.dims3()?;
        if n != self.points || c != 2 {
            return Err(shape_err!("landmark encoder expects ({}, 2) points, got ({n}, {c})", self.points));
        }
        let mut x = points.transpose(1, 2)?.contiguous()?;
        for conv in &self.convs {
            x = silu(&conv.forward(&x)?)?;
        }
        self.proj.forward(&x.mean(2)?)
    }
}

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{layers::silu, ops, Conv2d, Linear, ParamStore};

const NORM_EPS: f64 = 1e-5;

/// Spatially-adaptive normalization: `IN(x) * (1 + scale(c)) + shift(c)`,
/// where `c` is the conditioning map resized to `x`'s resolution.
///
/// Parameter names end in `scale.*` / `shift.*` so the affine maps can be
/// located and frozen.
#[derive(Debug, Clone)]
pub struct Spade {
    shared: Conv2d,
    scale: Conv2d,
    shift: Conv2d,
}

impl Spade {
    pub fn new(channels: usize, cond_channels: usize, hidden: usize, ps: &ParamStore) -> Result<Self> {
        Ok(Self {
            shared: Conv2d::new(cond_channels, hidden, 3, 1, &ps.pp("shared"))?,
            scale: Conv2d::new(hidden, channels, 3, 1, &ps.pp("scale"))?,
            shift: Conv2d::new(hidden, channels, 3, 1, &ps.pp("shift"))?,
        })
    }

    /// `cond` may have fewer samples than `x` when each condition is shared by
    /// `n` consecutive samples of `x` (batch `B` vs `B * n`).
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (bx, cx, h, w) = x.dims4()?;
        let bc = cond.dim(0)?;
        if bc == 0 || bx % bc != 0 {
            return Err(crate::error::shape_err!("spade: condition batch {bc} does not divide input batch {bx}"));
        }
        let c = ops::downsample_to(cond, h, w)?;
        let hidden = silu(&self.shared.forward(&c)?)?;
        let expand = |t: Tensor| -> Result<Tensor> {
            if bc == bx {
                return Ok(t);
            }
            Ok(t.unsqueeze(1)?.broadcast_as((bc, bx / bc, cx, h, w))?.reshape((bx, cx, h, w))?)
        };
        let scale = expand((self.scale.forward(&hidden)? + 1.0)?)?;
        let shift = expand(self.shift.forward(&hidden)?)?;
        Ok(((ops::instance_norm(x, NORM_EPS)? * scale)? + shift)?)
    }
}

/// Channel-wise modulation from a vector: `IN(x) * (1 + scale(a)) + shift(a)`.
#[derive(Debug, Clone)]
pub struct AdaIn {
    scale: Linear,
    shift: Linear,
}

impl AdaIn {
    pub fn new(channels: usize, embed_dim: usize, ps: &ParamStore) -> Result<Self> {
        Ok(Self {
            scale: Linear::new(embed_dim, channels, &ps.pp("scale"))?,
            shift: Linear::new(embed_dim, channels, &ps.pp("shift"))?,
        })
    }

    /// `x`: `(B, C, H, W)`, `embed`: `(B, D)`.
    pub fn forward(&self, x: &Tensor, embed: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let scale = (self.scale.forward(embed)? + 1.0)?.reshape((b, c, 1, 1))?;
        let shift = self.shift.forward(embed)?.reshape((b, c, 1, 1))?;
        Ok(ops::instance_norm(x, NORM_EPS)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

use candle_core::{DType, Tensor};

use crate::error::{shape_err, Result};
use crate::nn::{layers::lrelu, Conv2d, Init, ParamStore};

/// Fixed feature extractor used by the perceptual, reconstruction and style losses.
pub trait PerceptualBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Feature maps `(B, C_i, H_i, W_i)`, one per level, for an image `(B, 3, H, W)`.
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>>;
}

/// Single level returning the image itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackend;

impl PerceptualBackend for IdentityBackend {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![image.clone()])
    }
}

/// Frozen, randomly initialized convolutional pyramid.
///
/// Level 0 keeps full resolution; each later level halves it. Weights come
/// from a fixed seed so every run sees the same extractor.
#[derive(Debug, Clone)]
pub struct RandomConvPyramid {
    convs: Vec<Conv2d>,
    tag: String,
}

impl RandomConvPyramid {
    pub const DEFAULT_SEED: u64 = 0x5eed_f00d;

    pub fn new(widths: &[usize], seed: u64, dtype: DType) -> Result<Self> {
        if widths.is_empty() {
            return Err(shape_err!("perceptual pyramid needs at least one level"));
        }
        // private store: these parameters never reach an optimizer
        let ps = ParamStore::new(seed, dtype);
        let mut cin = 3;
        let mut convs = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let std = (2.0 / (cin * 9) as f64).sqrt();
            convs.push(Conv2d::with_geometry(cin, w, (3, 3), (stride, stride), (1, 1), Init::Normal(std), &ps.pp(format!("level{i}")))?);
            cin = w;
        }
        Ok(Self {
            convs,
            tag: format!("random-pyramid-v1/{seed}/{widths:?}"),
        })
    }

    pub fn default_for(dtype: DType) -> Result<Self> {
        Self::new(&[16, 32, 64, 64], Self::DEFAULT_SEED, dtype)
    }
}

impl PerceptualBackend for RandomConvPyramid {
    fn name(&self) -> &str {
        &self.tag
    }

    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = image.clone();
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            x = lrelu(&conv.forward(&x)?)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

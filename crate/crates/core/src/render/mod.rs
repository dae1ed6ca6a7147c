//! Stage 2: reference alignment by motion fields and sketch-to-face translation.

mod alignment;
mod modulation;
mod translation;
mod warp;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use alignment::{AlignmentNet, RefFeaturePyramid};
pub use modulation::{AdaIn, Spade};
pub use translation::{TranslationInputs, TranslationNet};
pub use warp::{aggregate, aggregate_stacked, warp, MotionField, WEIGHT_EPS};

use crate::encoders::AudioEncoder;
use crate::error::{shape_err, Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub image_size: usize,
    /// Sketch context `k`: the renderer sees frames `t-k..=t+k`.
    pub context: usize,
    pub align_width: usize,
    /// Channels of the `H/4` reference features.
    pub c1: usize,
    /// Channels of the `H/2` reference features.
    pub c2: usize,
    pub spade_hidden: usize,
    pub translate_width: usize,
    pub audio_width: usize,
    pub audio_dim: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            context: 2,
            align_width: 32,
            c1: 256,
            c2: 128,
            spade_hidden: 64,
            translate_width: 32,
            audio_width: 32,
            audio_dim: 512,
        }
    }
}

impl RenderConfig {
    /// Narrow network for tests and gradient checks.
    pub fn tiny(image_size: usize) -> Self {
        Self {
            image_size,
            context: 2,
            align_width: 4,
            c1: 8,
            c2: 6,
            spade_hidden: 4,
            translate_width: 4,
            audio_width: 2,
            audio_dim: 8,
        }
    }

    pub fn num_sketches(&self) -> usize {
        2 * self.context + 1
    }

    pub fn sketch_channels(&self) -> usize {
        3 * self.num_sketches()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("render.image_size must be a positive multiple of 8, got {}", self.image_size)));
        }
        let widths = [self.align_width, self.c1, self.c2, self.spade_hidden, self.translate_width, self.audio_width, self.audio_dim];
        if widths.contains(&0) {
            return Err(Error::Config("render widths must be positive".into()));
        }
        Ok(())
    }
}

/// Batched stage-2 inputs.
#[derive(Debug, Clone)]
pub struct RenderBatch {
    /// `(B, 3, H, W)`, lower half zero.
    pub masked_face: Tensor,
    /// `(B, 3(2k+1), H, W)`
    pub target_sketches: Tensor,
    /// `(B, N, 3, H, W)`
    pub ref_images: Tensor,
    /// `(B, N, 3, H, W)`
    pub ref_sketches: Tensor,
    /// `(B, 16, 80)`
    pub audio: Tensor,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Tensor,
    pub agg_image: Tensor,
    pub agg_h1: Tensor,
    pub agg_h2: Tensor,
    pub audio_embed: Tensor,
}

/// Alignment network, translation network and render audio encoder, trained jointly.
#[derive(Debug, Clone)]
pub struct Renderer {
    cfg: RenderConfig,
    pub alignment: AlignmentNet,
    pub translation: TranslationNet,
    pub audio_encoder: AudioEncoder,
}

impl Renderer {
    pub fn new(cfg: &RenderConfig, ps: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            alignment: AlignmentNet::new(cfg, &ps.pp("alignment"))?,
            translation: TranslationNet::new(cfg, &ps.pp("translation"))?,
            audio_encoder: AudioEncoder::new(cfg.audio_width, cfg.audio_dim, false, &ps.pp("audio_encoder"))?,
        })
    }

    pub fn config(&self) -> &RenderConfig {
        &self.cfg
    }

    pub fn encode_audio(&self, chunks: &Tensor) -> Result<Tensor> {
        self.audio_encoder.forward(chunks)
    }

    /// Warps every reference to the target and aggregates image, `h1` and `h2`.
    pub fn align(&self, batch: &RenderBatch) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, n, c, h, w) = batch.ref_images.dims5()?;
        if batch.ref_sketches.dims() != batch.ref_images.dims() {
            return Err(shape_err!("reference sketches {:?} vs images {:?}", batch.ref_sketches.dims(), batch.ref_images.dims()));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("at least one reference is required".into()));
        }
        let imgs = batch.ref_images.reshape((b * n, c, h, w))?;
        let sks = batch.ref_sketches.reshape((b * n, c, h, w))?;
        let feats = self.alignment.encode_reference_features(&imgs, &sks)?;
        // each target sketch stack conditions all n references of its sample
        let field = self.alignment.predict_motion_from_features(&feats, &batch.target_sketches)?;

        let warp_agg = |x: &Tensor, f: &MotionField| -> Result<Tensor> {
            let (_, cx, hx, wx) = x.dims4()?;
            let warped = warp(x, &f.offsets)?.reshape((b, n, cx, hx, wx))?;
            aggregate_stacked(&warped, &f.weight.reshape((b, n, 1, hx, wx))?)
        };
        let agg_image = warp_agg(&imgs, &field)?;
        let f1 = field.resized(h / 4, w / 4)?;
        let f2 = field.resized(h / 2, w / 2)?;
        let agg_h1 = warp_agg(&feats.h1, &f1)?;
        let agg_h2 = warp_agg(&feats.h2, &f2)?;
        Ok((agg_image, agg_h1, agg_h2))
    }

    pub fn forward(&self, batch: &RenderBatch) -> Result<RenderOutput> {
        let (agg_image, agg_h1, agg_h2) = self.align(batch)?;
        let audio_embed = self.encode_audio(&batch.audio)?;
        let image = self.translation.forward(&TranslationInputs {
            masked_face: batch.masked_face.clone(),
            target_sketches: batch.target_sketches.clone(),
            agg_image: agg_image.clone(),
            agg_h1: agg_h1.clone(),
            agg_h2: agg_h2.clone(),
            audio_embed: audio_embed.clone(),
        })?;
        Ok(RenderOutput { image, agg_image, agg_h1, agg_h2, audio_embed })
    }
}

use candle_core::Tensor;

use super::modulation::{AdaIn, Spade};
use super::RenderConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::{layers::silu, ops, Conv2d, ParamStore};

/// Inputs to the translation network, all batched.
#[derive(Debug, Clone)]
pub struct TranslationInputs {
    /// `(B, 3, H, W)` with rows `>= H/2` zero.
    pub masked_face: Tensor,
    /// `(B, 3(2k+1), H, W)`
    pub target_sketches: Tensor,
    /// `(B, 3, H, W)`
    pub agg_image: Tensor,
    /// `(B, c1, H/4, W/4)`
    pub agg_h1: Tensor,
    /// `(B, c2, H/2, W/2)`
    pub agg_h2: Tensor,
    /// `(B, D)`
    pub audio_embed: Tensor,
}

/// Decoder stage: upsample, concatenate the encoder skip, SPADE, AdaIN, conv.
#[derive(Debug, Clone)]
struct UpStage {
    up: Conv2d,
    spade: Spade,
    adain: AdaIn,
    fuse: Conv2d,
}

impl UpStage {
    fn new(cin: usize, cout: usize, cond: usize, cfg: &RenderConfig, ps: &ParamStore) -> Result<Self> {
        Ok(Self {
            up: Conv2d::new(cin, 4 * cout, 3, 1, &ps.pp("up"))?,
            spade: Spade::new(2 * cout, cond, cfg.spade_hidden, &ps.pp("spade"))?,
            adain: AdaIn::new(2 * cout, cfg.audio_dim, &ps.pp("adain"))?,
            fuse: Conv2d::new(2 * cout, cout, 3, 1, &ps.pp("fuse"))?,
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor, cond: &Tensor, audio: &Tensor) -> Result<Tensor> {
        let x = ops::pixel_shuffle(&self.up.forward(x)?, 2)?;
        let x = Tensor::cat(&[&x, skip], 1)?;
        let x = self.spade.forward(&x, cond)?;
        let x = silu(&self.adain.forward(&x, audio)?)?;
        silu(&self.fuse.forward(&x)?)
    }
}

/// Encoder-decoder that completes the masked face.
///
/// Three stride-2 stages take `H` to `H/8`; three channel-to-space stages come
/// back up, modulated by `agg_h1` at `H/4`, `agg_h2` at `H/2`, `agg_image` at `H`.
#[derive(Debug, Clone)]
pub struct TranslationNet {
    cfg: RenderConfig,
    e0: Conv2d,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    mid: Conv2d,
    d1: UpStage,
    d2: UpStage,
    d3: UpStage,
    out: Conv2d,
}

impl TranslationNet {
    pub fn new(cfg: &RenderConfig, ps: &ParamStore) -> Result<Self> {
        let w = cfg.translate_width;
        let cin = 3 + cfg.sketch_channels();
        Ok(Self {
            cfg: cfg.clone(),
            e0: Conv2d::new(cin, w, 3, 1, &ps.pp("e0"))?,
            e1: Conv2d::new(w, 2 * w, 3, 2, &ps.pp("e1"))?,
            e2: Conv2d::new(2 * w, 4 * w, 3, 2, &ps.pp("e2"))?,
            e3: Conv2d::new(4 * w, 8 * w, 3, 2, &ps.pp("e3"))?,
            mid: Conv2d::new(8 * w, 8 * w, 3, 1, &ps.pp("mid"))?,
            d1: UpStage::new(8 * w, 4 * w, cfg.c1, cfg, &ps.pp("d1"))?,
            d2: UpStage::new(4 * w, 2 * w, cfg.c2, cfg, &ps.pp("d2"))?,
            d3: UpStage::new(2 * w, w, 3, cfg, &ps.pp("d3"))?,
            out: Conv2d::new(w, 3, 3, 1, &ps.pp("out"))?,
        })
    }

    fn check(&self, inp: &TranslationInputs) -> Result<()> {
        let (b, c, h, w) = inp.masked_face.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err!("masked face must be (B,3,H,W) with H,W divisible by 8, got {:?}", inp.masked_face.dims()));
        }
        let expect = |t: &Tensor, ch: usize, s: usize, what: &str| -> Result<()> {
            if t.dims() != [b, ch, h / s, w / s] {
                return Err(shape_err!("{what}: expected {:?}, got {:?}", [b, ch, h / s, w / s], t.dims()));
            }
            Ok(())
        };
        expect(&inp.target_sketches, self.cfg.sketch_channels(), 1, "target sketches")?;
        expect(&inp.agg_image, 3, 1, "aggregated image")?;
        expect(&inp.agg_h1, self.cfg.c1, 4, "aggregated h1")?;
        expect(&inp.agg_h2, self.cfg.c2, 2, "aggregated h2")?;
        if inp.audio_embed.dims() != [b, self.cfg.audio_dim] {
            return Err(shape_err!("audio embedding: expected {:?}, got {:?}", [b, self.cfg.audio_dim], inp.audio_embed.dims()));
        }
        let lower = inp.masked_face.narrow(2, h / 2, h - h / 2)?;
        if lower.abs()?.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? != 0.0 {
            return Err(Error::InvalidArgument("translation input face is not lower-half masked".into()));
        }
        Ok(())
    }

    pub fn forward(&self, inp: &TranslationInputs) -> Result<Tensor> {
        self.check(inp)?;
        let x = Tensor::cat(&[&inp.masked_face, &inp.target_sketches], 1)?;
        let s0 = silu(&self.e0.forward(&x)?)?;
        let s1 = silu(&self.e1.forward(&s0)?)?;
        let s2 = silu(&self.e2.forward(&s1)?)?;
        let s3 = silu(&self.e3.forward(&s2)?)?;
        let x = silu(&self.mid.forward(&s3)?)?;
        let x = self.d1.forward(&x, &s2, &inp.agg_h1, &inp.audio_embed)?;
        let x = self.d2.forward(&x, &s1, &inp.agg_h2, &inp.audio_embed)?;
        let x = self.d3.forward(&x, &s0, &inp.agg_image, &inp.audio_embed)?;
        ops::sigmoid(&self.out.forward(&x)?)
    }
}

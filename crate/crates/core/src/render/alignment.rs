use candle_core::Tensor;

use super::modulation::Spade;
use super::warp::MotionField;
use super::RenderConfig;
use crate::error::{shape_err, Result};
use crate::nn::{layers::silu, ops, Conv2d, Init, ParamStore};

/// Reference features at `H/4` (`h1`) and `H/2` (`h2`).
#[derive(Debug, Clone)]
pub struct RefFeaturePyramid {
    pub h1: Tensor,
    pub h2: Tensor,
    /// Full-resolution stem features, used by the motion decoder only.
    pub h0: Tensor,
}

/// Predicts a motion field for one reference from its image, its sketch, and the target sketches.
#[derive(Debug, Clone)]
pub struct AlignmentNet {
    cfg: RenderConfig,
    stem: Conv2d,
    down_h2: Conv2d,
    down_h1: Conv2d,
    spade1: Spade,
    up1: Conv2d,
    spade2: Spade,
    up2: Conv2d,
    spade3: Spade,
    head: Conv2d,
}

impl AlignmentNet {
    pub fn new(cfg: &RenderConfig, ps: &ParamStore) -> Result<Self> {
        let (c0, c1, c2) = (cfg.align_width, cfg.c1, cfg.c2);
        let cond = cfg.sketch_channels();
        let hid = cfg.spade_hidden;
        Ok(Self {
            cfg: cfg.clone(),
            stem: Conv2d::new(6, c0, 3, 1, &ps.pp("stem"))?,
            down_h2: Conv2d::new(c0, c2, 3, 2, &ps.pp("down_h2"))?,
            down_h1: Conv2d::new(c2, c1, 3, 2, &ps.pp("down_h1"))?,
            spade1: Spade::new(c1, cond, hid, &ps.pp("spade1"))?,
            up1: Conv2d::new(c1, 4 * c2, 3, 1, &ps.pp("up1"))?,
            spade2: Spade::new(2 * c2, cond, hid, &ps.pp("spade2"))?,
            up2: Conv2d::new(2 * c2, 4 * c0, 3, 1, &ps.pp("up2"))?,
            spade3: Spade::new(2 * c0, cond, hid, &ps.pp("spade3"))?,
            head: Conv2d::with_geometry(2 * c0, 3, (3, 3), (1, 1), (1, 1), Init::Normal(1e-3), &ps.pp("head"))?,
        })
    }

    /// Encodes `cat(ref_sketch, ref_img)`, both `(B, 3, H, W)`.
    pub fn encode_reference_features(&self, ref_img: &Tensor, ref_sketch: &Tensor) -> Result<RefFeaturePyramid> {
        let (b, c, h, w) = ref_img.dims4()?;
        let (bs, cs, hs, ws) = ref_sketch.dims4()?;
        if (b, c, h, w) != (bs, cs, hs, ws) || c != 3 {
            return Err(shape_err!("reference image {:?} and sketch {:?} must both be (B,3,H,W)", ref_img.dims(), ref_sketch.dims()));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err!("image size {h}x{w} must be divisible by 4"));
        }
        let x = Tensor::cat(&[ref_sketch, ref_img], 1)?;
        let h0 = silu(&self.stem.forward(&x)?)?;
        let h2 = silu(&self.down_h2.forward(&h0)?)?;
        let h1 = silu(&self.down_h1.forward(&h2)?)?;
        Ok(RefFeaturePyramid { h1, h2, h0 })
    }

    /// Motion field from the pyramid of `B * n` references; `target_sketches` is `(B, 3(2k+1), H, W)`,
    /// shared by each group of `n` consecutive references, and enters only through SPADE.
    pub fn predict_motion_from_features(&self, feats: &RefFeaturePyramid, target_sketches: &Tensor) -> Result<MotionField> {
        let cond = target_sketches.dim(1)?;
        if cond != self.cfg.sketch_channels() {
            return Err(shape_err!(
                "expected {} target sketches ({} channels), got {cond} channels",
                self.cfg.num_sketches(),
                self.cfg.sketch_channels()
            ));
        }
        let x = silu(&self.spade1.forward(&feats.h1, target_sketches)?)?;
        let x = ops::pixel_shuffle(&self.up1.forward(&x)?, 2)?;
        let x = Tensor::cat(&[&x, &feats.h2], 1)?;
        let x = silu(&self.spade2.forward(&x, target_sketches)?)?;
        let x = ops::pixel_shuffle(&self.up2.forward(&x)?, 2)?;
        let x = Tensor::cat(&[&x, &feats.h0], 1)?;
        let x = silu(&self.spade3.forward(&x, target_sketches)?)?;
        MotionField::from_raw(&self.head.forward(&x)?)
    }

    pub fn predict_motion(&self, ref_img: &Tensor, ref_sketch: &Tensor, target_sketches: &Tensor) -> Result<MotionField> {
        let feats = self.encode_reference_features(ref_img, ref_sketch)?;
        self.predict_motion_from_features(&feats, target_sketches)
    }
}

//! Stage-2 training objectives and evaluation metrics.

mod adversarial;
mod metrics;
mod perceptual;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use adversarial::{
    feature_matching_loss, ls_discriminator_loss, ls_generator_loss, DiscriminatorConfig, PatchDiscriminator, ScaleOutput,
};
pub use metrics::{lip_lmd, psnr, ssim, PSNR_CAP_DB};
pub use perceptual::{IdentityBackend, PerceptualBackend, RandomConvPyramid};

use crate::error::{shape_err, Error, Result};

/// How the element-wise absolute differences of one level are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over all elements of the level.
    #[default]
    Mean,
    /// Sum over the non-batch elements, mean over the batch.
    Sum,
}

fn reduce_abs(diff: &Tensor, reduction: Reduction) -> Result<Tensor> {
    let abs = diff.abs()?;
    Ok(match reduction {
        Reduction::Mean => abs.mean_all()?,
        Reduction::Sum => (abs.sum_all()? / diff.dim(0)? as f64)?,
    })
}

fn sum_terms(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| shape_err!("backend returned no feature levels"))?;
    it.try_fold(first, |acc, t| Ok((acc + t)?))
}

fn check_images(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("images differ in shape: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `sum_i mean|phi_i(a) - phi_i(b)|`.
pub fn perceptual_l1(a: &Tensor, b: &Tensor, backend: &dyn PerceptualBackend) -> Result<Tensor> {
    check_images(a, b)?;
    let fa = backend.features(a)?;
    let fb = backend.features(b)?;
    sum_terms(fa.iter().zip(&fb).map(|(x, y)| reduce_abs(&(x - y)?, Reduction::Mean)).collect::<Result<_>>()?)
}

/// Perceptual distance between the aggregated warped reference and the target.
pub fn loss_warp(agg_image: &Tensor, gt: &Tensor, backend: &dyn PerceptualBackend) -> Result<Tensor> {
    perceptual_l1(agg_image, gt, backend)
}

/// Perceptual distance between the generated frame and the target.
pub fn loss_recon(generated: &Tensor, gt: &Tensor, backend: &dyn PerceptualBackend) -> Result<Tensor> {
    perceptual_l1(generated, gt, backend)
}

/// `G(f) = F F^T / (c h w)` for `f` flattened to `(B, c, h w)`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let flat = f.reshape((b, c, h * w))?;
    Ok((flat.matmul(&flat.t()?)? / (c * h * w) as f64)?)
}

/// `sum_i |G(phi_i(gen)) - G(phi_i(gt))|` reduced per level as requested.
pub fn loss_style(generated: &Tensor, gt: &Tensor, backend: &dyn PerceptualBackend, reduction: Reduction) -> Result<Tensor> {
    check_images(generated, gt)?;
    let fa = backend.features(generated)?;
    let fb = backend.features(gt)?;
    sum_terms(
        fa.iter()
            .zip(&fb)
            .map(|(x, y)| reduce_abs(&(gram(x)? - gram(y)?)?, reduction))
            .collect::<Result<_>>()?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub warp: f64,
    pub recon: f64,
    pub style: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            warp: 2.5,
            recon: 4.0,
            style: 1000.0,
            adversarial: 0.25,
            feature_matching: 2.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.warp, self.recon, self.style, self.adversarial, self.feature_matching];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

/// The five scalar generator-side terms.
#[derive(Debug, Clone)]
pub struct Stage2Terms {
    pub warp: Tensor,
    pub recon: Tensor,
    pub style: Tensor,
    pub adversarial: Tensor,
    pub feature_matching: Tensor,
}

/// Weighted sum of the five terms.
pub fn stage2_loss(terms: &Stage2Terms, weights: &LossWeights) -> Result<Tensor> {
    let parts = [
        (&terms.warp, weights.warp),
        (&terms.recon, weights.recon),
        (&terms.style, weights.style),
        (&terms.adversarial, weights.adversarial),
        (&terms.feature_matching, weights.feature_matching),
    ];
    sum_terms(parts.iter().map(|(t, w)| Ok((*t * *w)?)).collect::<Result<_>>()?)
}

/// Computes all generator-side terms for one batch.
pub fn stage2_terms(
    generated: &Tensor,
    agg_image: &Tensor,
    gt: &Tensor,
    backend: &dyn PerceptualBackend,
    disc: &PatchDiscriminator,
    style_reduction: Reduction,
) -> Result<Stage2Terms> {
    let fake = disc.forward(generated)?;
    let real = disc.forward(gt)?;
    Ok(Stage2Terms {
        warp: loss_warp(agg_image, gt, backend)?,
        recon: loss_recon(generated, gt, backend)?,
        style: loss_style(generated, gt, backend, style_reduction)?,
        adversarial: ls_generator_loss(&fake)?,
        feature_matching: feature_matching_loss(&fake, &real)?,
    })
}

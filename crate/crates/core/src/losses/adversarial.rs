use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{layers::lrelu, Conv2d, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub scales: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width: 32, scales: 2 }
    }
}

#[derive(Debug, Clone)]
struct PatchScale {
    layers: Vec<Conv2d>,
    out: Conv2d,
}

/// What one discriminator scale saw: intermediate features and the patch map.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub features: Vec<Tensor>,
    pub patches: Tensor,
}

/// Multi-scale patch discriminator; scale `s` sees the image average-pooled `2^s` times.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    scales: Vec<PatchScale>,
}

impl PatchDiscriminator {
    pub fn new(cfg: &DiscriminatorConfig, ps: &ParamStore) -> Result<Self> {
        let w = cfg.width;
        let scales = (0..cfg.scales)
            .map(|s| {
                let ps = ps.pp(format!("scale{s}"));
                Ok(PatchScale {
                    layers: vec![
                        Conv2d::new(3, w, 3, 2, &ps.pp("conv0"))?,
                        Conv2d::new(w, 2 * w, 3, 2, &ps.pp("conv1"))?,
                        Conv2d::new(2 * w, 4 * w, 3, 2, &ps.pp("conv2"))?,
                    ],
                    out: Conv2d::new(4 * w, 1, 3, 1, &ps.pp("out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scales })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Vec<ScaleOutput>> {
        let (_, c, h, w) = image.dims4()?;
        let min_side = 8usize << self.scales.len().saturating_sub(1);
        if c != 3 || h < min_side || w < min_side {
            return Err(shape_err!("discriminator needs (B,3,H,W) with H,W >= {min_side}, got {:?}", image.dims()));
        }
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(self.scales.len());
        for (i, scale) in self.scales.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            let mut f = x.clone();
            let mut features = Vec::with_capacity(scale.layers.len());
            for conv in &scale.layers {
                f = lrelu(&conv.forward(&f)?)?;
                features.push(f.clone());
            }
            outs.push(ScaleOutput { patches: scale.out.forward(&f)?, features });
        }
        Ok(outs)
    }
}

/// Least-squares generator objective: `sum_s mean((D(fake) - 1)^2)`.
pub fn ls_generator_loss(fake: &[ScaleOutput]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for s in fake {
        let term = (&s.patches - 1.0)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| shape_err!("no discriminator scales"))
}

/// Least-squares discriminator objective: `sum_s 0.5 (mean((D(real) - 1)^2) + mean(D(fake)^2))`.
pub fn ls_discriminator_loss(real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(shape_err!("real/fake scale counts differ: {} vs {}", real.len(), fake.len()));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let term = (((&r.patches - 1.0)?.sqr()?.mean_all()? + f.patches.sqr()?.mean_all()?)? * 0.5)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `sum_s sum_l mean|f_l(fake) - f_l(real)|`, with real features treated as constants.
pub fn feature_matching_loss(fake: &[ScaleOutput], real: &[ScaleOutput]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(shape_err!("real/fake scale counts differ: {} vs {}", real.len(), fake.len()));
    }
    let mut total: Option<Tensor> = None;
    for (f, r) in fake.iter().zip(real) {
        for (ff, rf) in f.features.iter().zip(&r.features) {
            let term = (ff - rf.detach())?.abs()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("non-empty"))
}

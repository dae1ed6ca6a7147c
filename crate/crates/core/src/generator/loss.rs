use candle_core::{DType, Tensor};

use super::LandmarkPrediction;
use crate::error::{shape_err, Error, Result};
use crate::landmarks::{schema, LandmarkSet};

/// Keeps the Euclidean norm differentiable at zero: `s / sqrt(s + eps)` with `s = |x|^2`.
const NORM_EPS: f64 = 1e-12;

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: prediction {:?} vs target {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `(1/T) sum_t (|d lip_t|_1 + |d jaw_t|_1)`, averaged over the batch.
pub fn loss_l1(pred: &LandmarkPrediction, gt: &LandmarkPrediction) -> Result<Tensor> {
    check_same(&pred.lip, &gt.lip, "lip")?;
    check_same(&pred.jaw, &gt.jaw, "jaw")?;
    let (b, t, _, _) = pred.lip.dims4()?;
    let lip = (&pred.lip - &gt.lip)?.abs()?.sum_all()?;
    let jaw = (&pred.jaw - &gt.jaw)?.abs()?.sum_all()?;
    Ok(((lip + jaw)? / (b * t) as f64)?)
}

fn frame_norms_of_delta_error(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (b, t, _, _) = pred.dims4()?;
    let dp = (pred.narrow(1, 1, t - 1)? - pred.narrow(1, 0, t - 1)?)?;
    let dg = (gt.narrow(1, 1, t - 1)? - gt.narrow(1, 0, t - 1)?)?;
    let sq = (dp - dg)?.reshape((b, t - 1, ()))?.sqr()?.sum(2)?;
    Ok((&sq / (&sq + NORM_EPS)?.sqrt()?)?)
}

/// `(1/(T-1)) sum_t (|dpred_lip - dgt_lip|_2 + same for jaw)`, averaged over the batch.
pub fn loss_continuity(pred: &LandmarkPrediction, gt: &LandmarkPrediction) -> Result<Tensor> {
    check_same(&pred.lip, &gt.lip, "lip")?;
    check_same(&pred.jaw, &gt.jaw, "jaw")?;
    let (b, t, _, _) = pred.lip.dims4()?;
    if t < 2 {
        return Err(Error::InvalidArgument(format!("continuity loss needs at least 2 frames, got {t}")));
    }
    let lip = frame_norms_of_delta_error(&pred.lip, &gt.lip)?.sum_all()?;
    let jaw = frame_norms_of_delta_error(&pred.jaw, &gt.jaw)?.sum_all()?;
    Ok(((lip + jaw)? / (b * (t - 1)) as f64)?)
}

/// `L1 + lambda_c * Lc`.
pub fn stage1_loss(pred: &LandmarkPrediction, gt: &LandmarkPrediction, lambda_c: f64) -> Result<Tensor> {
    Ok((loss_l1(pred, gt)? + (loss_continuity(pred, gt)? * lambda_c)?)?)
}

/// Mean lip+jaw point distance in pixels on a `canvas`-sized image.
pub fn landmark_error(pred: &[LandmarkSet], gt: &[LandmarkSet], canvas: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "sequence lengths differ: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty sequences".into()));
    }
    let groups = &schema().groups;
    let indices: Vec<usize> = groups.lip.iter().chain(&groups.jaw).copied().collect();
    let mut total = 0.0f64;
    for (p, g) in pred.iter().zip(gt) {
        for &i in &indices {
            let (a, b) = (p.points()[i], g.points()[i]);
            total += ((a[0] - b[0]) as f64).hypot((a[1] - b[1]) as f64);
        }
    }
    Ok(total / (pred.len() * indices.len()) as f64 * canvas as f64)
}

/// Tensor form of [`landmark_error`] over a batch of predictions.
pub fn landmark_error_tensors(pred: &LandmarkPrediction, gt: &LandmarkPrediction, canvas: usize) -> Result<f64> {
    check_same(&pred.lip, &gt.lip, "lip")?;
    check_same(&pred.jaw, &gt.jaw, "jaw")?;
    let dist = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        Ok((a - b)?.to_dtype(DType::F64)?.sqr()?.sum(3)?.sqrt()?.flatten_all()?)
    };
    let all = Tensor::cat(&[dist(&pred.lip, &gt.lip)?, dist(&pred.jaw, &gt.jaw)?], 0)?;
    Ok(all.mean_all()?.to_scalar::<f64>()? * canvas as f64)
}

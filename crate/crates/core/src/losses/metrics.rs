use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};
use crate::landmarks::Point;

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_dims(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err!("images differ in shape: {:?} vs {:?}", a.dim(), b.dim()));
    }
    if a.is_empty() {
        return Err(shape_err!("empty image"));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0,1]`, capped at 100 dB.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a.iter().zip(b).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).sum::<f64>() / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..n).map(|i| img[[y, x + i]] * k[i]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|i| rows[[y + i, x]] * k[i]).sum();
        }
    }
    out
}

fn ssim_channel(a: ArrayView2<f32>, b: ArrayView2<f32>, k: &[f64]) -> f64 {
    let a = a.mapv(|v| v as f64);
    let b = b.mapv(|v| v as f64);
    let mu_a = filter_valid(&a, k);
    let mu_b = filter_valid(&b, k);
    let saa = filter_valid(&(&a * &a), k) - &mu_a * &mu_a;
    let sbb = filter_valid(&(&b * &b), k) - &mu_b * &mu_b;
    let sab = filter_valid(&(&a * &b), k) - &mu_a * &mu_b;
    let num = (2.0 * &mu_a * &mu_b + SSIM_C1) * (2.0 * &sab + SSIM_C2);
    let den = (&mu_a * &mu_a + &mu_b * &mu_b + SSIM_C1) * (saa + sbb + SSIM_C2);
    (num / den).mean().unwrap_or(1.0)
}

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5).
///
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    same_dims(a, b)?;
    let (c, h, w) = a.dim();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let total: f64 = (0..c)
        .map(|ch| ssim_channel(a.index_axis(Axis(0), ch), b.index_axis(Axis(0), ch), &k))
        .sum();
    Ok(total / c as f64)
}

/// Mean lip-point distance divided by the face diagonal.
pub fn lip_lmd(generated: &[Point], ground_truth: &[Point], face_diag: f64) -> Result<f64> {
    if generated.len() != ground_truth.len() || generated.is_empty() {
        return Err(shape_err!("lip point counts differ: {} vs {}", generated.len(), ground_truth.len()));
    }
    if !(face_diag > 0.0) {
        return Err(Error::InvalidArgument(format!("face diagonal must be positive, got {face_diag}")));
    }
    let total: f64 = generated
        .iter()
        .zip(ground_truth)
        .map(|(p, q)| ((p[0] - q[0]) as f64).hypot((p[1] - q[1]) as f64))
        .sum();
    Ok(total / generated.len() as f64 / face_diag)
}

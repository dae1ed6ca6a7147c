use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{LandmarkSet, Point};
use crate::error::{Error, Result};

/// An RGB face crop, `3 x H x W` in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFrame {
    pub pixels: Array3<f32>,
    pub masked_lower_half: bool,
}

impl FaceFrame {
    pub fn new(pixels: Array3<f32>) -> Self {
        Self {
            pixels,
            masked_lower_half: false,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Zeroes every row at or below `H/2`.
pub fn mask_lower_half(frame: &FaceFrame) -> FaceFrame {
    let mut pixels = frame.pixels.clone();
    let h = frame.height();
    pixels.slice_mut(s![.., h / 2.., ..]).fill(0.0);
    FaceFrame {
        pixels,
        masked_lower_half: true,
    }
}

/// Face rectangle in original-frame pixels; `x1`/`y1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl FaceBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0) as usize
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0) as usize
    }

    pub fn validate(&self, frame_h: usize, frame_w: usize) -> Result<()> {
        if self.width() == 0 || self.height() == 0 {
            return Err(Error::InvalidArgument(format!("degenerate face box {self:?}")));
        }
        if self.x1 as usize > frame_w || self.y1 as usize > frame_h {
            return Err(Error::InvalidArgument(format!(
                "face box {self:?} exceeds {frame_w}x{frame_h} frame"
            )));
        }
        Ok(())
    }

    pub fn crop(&self, frame: &Array3<f32>) -> Array3<f32> {
        frame
            .slice(s![
                ..,
                self.y0 as usize..self.y1 as usize,
                self.x0 as usize..self.x1 as usize
            ])
            .to_owned()
    }
}

/// Bilinear resize with half-pixel centers; same-size resize is the identity.
pub fn resize_bilinear(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let axis = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, (n_in - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
                let bot = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Monotone-chain convex hull, counter-clockwise, without collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Point, a: Point, b: Point| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Binary mask of pixel centers inside the convex hull of the landmarks.
pub fn face_hull_mask(lm: &LandmarkSet, h: usize, w: usize) -> Array2<f32> {
    let hull: Vec<(f32, f32)> = convex_hull(lm.points())
        .into_iter()
        .map(|p| (p[0] * w as f32, p[1] * h as f32))
        .collect();
    let mut mask = Array2::<f32>::zeros((h, w));
    if hull.len() < 3 {
        return mask;
    }
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let inside = (0..hull.len()).all(|i| {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0) >= 0.0
            });
            if inside {
                mask[[y, x]] = 1.0;
            }
        }
    }
    mask
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders. `sigma <= 1e-6` is a no-op.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 1e-6 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let blur_axis = |src: &Array2<f32>, axis: Axis| {
        let (h, w) = src.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            k.iter()
                .enumerate()
                .map(|(j, &kv)| {
                    let off = j as isize - r;
                    let v = if axis == Axis(1) {
                        src[[y, (x as isize + off).clamp(0, w as isize - 1) as usize]]
                    } else {
                        src[[(y as isize + off).clamp(0, h as isize - 1) as usize, x]]
                    };
                    kv * v
                })
                .sum()
        })
    };
    let tmp = blur_axis(img, Axis(1));
    blur_axis(&tmp, Axis(0))
}

/// Hull mask blurred by a Gaussian of std `sigma` pixels, renormalized so its maximum is 1.
pub fn smooth_face_mask(lm: &LandmarkSet, h: usize, w: usize, sigma: f32) -> Array2<f32> {
    let mut m = gaussian_blur(&face_hull_mask(lm, h, w), sigma);
    let max = m.iter().cloned().fold(0.0f32, f32::max);
    if max > 0.0 {
        m.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    }
    m
}

/// Composites `generated` into `original` inside `face_box`:
/// `m * resized(generated) + (1 - m) * original`, with `mask` given at the
/// generated face's resolution. Pixels outside the box are copied unchanged.
pub fn paste_back(
    generated: &FaceFrame,
    original: &Array3<f32>,
    face_box: FaceBox,
    mask: &Array2<f32>,
) -> Result<Array3<f32>> {
    let (c, fh, fw) = original.dim();
    face_box.validate(fh, fw)?;
    if generated.pixels.dim().0 != c {
        return Err(Error::Shape(format!(
            "generated face has {} channels, frame has {c}",
            generated.pixels.dim().0
        )));
    }
    if mask.dim() != (generated.height(), generated.width()) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match generated face {}x{}",
            mask.dim(),
            generated.height(),
            generated.width()
        )));
    }
    let (bh, bw) = (face_box.height(), face_box.width());
    let face = resize_bilinear(&generated.pixels, bh, bw);
    let mask3 = mask.clone().insert_axis(Axis(0));
    let m = resize_bilinear(&mask3, bh, bw);
    let mut out = original.clone();
    for ch in 0..c {
        for y in 0..bh {
            for x in 0..bw {
                let (oy, ox) = (y + face_box.y0 as usize, x + face_box.x0 as usize);
                let mv = m[[0, y, x]];
                let o = original[[ch, oy, ox]];
                out[[ch, oy, ox]] = mv * face[[ch, y, x]] + (1.0 - mv) * o;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::FaceParams;

    #[test]
    fn lower_half_mask_counts_and_idempotence() {
        let frame = FaceFrame::new(Array3::ones((3, 128, 128)));
        let masked = mask_lower_half(&frame);
        assert!(masked.masked_lower_half);
        assert_eq!(masked.pixels.iter().filter(|&&v| v == 0.0).count(), 3 * 64 * 128);
        assert_eq!(mask_lower_half(&masked), masked);
        assert_eq!(masked.pixels[[0, 10, 10]].to_bits(), frame.pixels[[0, 10, 10]].to_bits());
    }

    #[test]
    fn hull_of_square_with_interior_points() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5], [0.2, 0.7]];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        for corner in &pts[..4] {
            assert!(hull.contains(corner));
        }
    }

    fn ramp_frame(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| ((c * 7 + y * 3 + x) % 17) as f32 / 16.0)
    }

    #[test]
    fn hard_mask_copies_generated_inside_hull() {
        let lm = FaceParams::default().landmarks();
        let original = ramp_frame(96, 96);
        let bx = FaceBox::new(16, 16, 80, 80);
        let generated = FaceFrame::new(Array3::from_elem((3, 64, 64), 0.25));
        let mask = smooth_face_mask(&lm, 64, 64, 0.0);
        let out = paste_back(&generated, &original, bx, &mask).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let v = out[[1, y + 16, x + 16]];
                if mask[[y, x]] == 1.0 {
                    assert_eq!(v, 0.25);
                } else {
                    assert_eq!(v, original[[1, y + 16, x + 16]]);
                }
            }
        }
    }

    #[test]
    fn pasting_the_crop_returns_the_original() {
        let lm = FaceParams::default().landmarks();
        let original = ramp_frame(80, 90);
        let bx = FaceBox::new(10, 5, 74, 69);
        let generated = FaceFrame::new(bx.crop(&original));
        let mask = smooth_face_mask(&lm, 64, 64, 0.02 * 64.0);
        let out = paste_back(&generated, &original, bx, &mask).unwrap();
        for (a, b) in out.iter().zip(original.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn half_mask_blends_evenly() {
        let original = Array3::zeros((3, 32, 32));
        let generated = FaceFrame::new(Array3::ones((3, 32, 32)));
        let mask = Array2::from_elem((32, 32), 0.5);
        let out = paste_back(&generated, &original, FaceBox::new(0, 0, 32, 32), &mask).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn outside_smoothed_mask_is_untouched() {
        let lm = FaceParams::default().landmarks();
        let original = ramp_frame(100, 100);
        let generated = FaceFrame::new(Array3::from_elem((3, 64, 64), 0.9));
        let mask = smooth_face_mask(&lm, 64, 64, 2.56);
        let bx = FaceBox::new(18, 18, 82, 82);
        let out = paste_back(&generated, &original, bx, &mask).unwrap();
        for y in 0..100 {
            for x in 0..100 {
                let inside = (18..82).contains(&y) && (18..82).contains(&x);
                if !inside || mask[[y - 18, x - 18]] == 0.0 {
                    for c in 0..3 {
                        assert_eq!(out[[c, y, x]].to_bits(), original[[c, y, x]].to_bits());
                    }
                }
            }
        }
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let original = Array3::zeros((3, 32, 32));
        let generated = FaceFrame::new(Array3::ones((3, 8, 8)));
        let mask = Array2::ones((8, 8));
        assert!(paste_back(&generated, &original, FaceBox::new(4, 4, 4, 10), &mask).is_err());
        assert!(paste_back(&generated, &original, FaceBox::new(0, 0, 40, 10), &mask).is_err());
    }

    #[test]
    fn blurred_mask_is_normalized() {
        let lm = FaceParams::default().landmarks();
        let m = smooth_face_mask(&lm, 64, 64, 3.0);
        let max = m.iter().cloned().fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

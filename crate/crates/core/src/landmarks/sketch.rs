use ndarray::{Array2, Array3};

use super::{schema, LandmarkSet, Point};

/// Three identical white-on-black channels, `3 x H x W` in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub pixels: Array3<f32>,
}

impl Sketch {
    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

fn to_pixel(p: Point, h: usize, w: usize) -> (f32, f32) {
    let x = p[0].clamp(0.0, 1.0) * w as f32 - 0.5;
    let y = p[1].clamp(0.0, 1.0) * h as f32 - 0.5;
    (x, y)
}

fn segment_distance(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Draws a 1-pixel-wide anti-aliased segment: coverage falls off linearly with
/// the distance from the pixel center to the segment.
fn draw_segment(canvas: &mut Array2<f32>, a: (f32, f32), b: (f32, f32)) {
    let (h, w) = canvas.dim();
    let x0 = (a.0.min(b.0) - 1.0).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + 1.0).ceil() as usize).min(w - 1);
    let y0 = (a.1.min(b.1) - 1.0).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + 1.0).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = segment_distance(x as f32, y as f32, a, b);
            let v = (1.0 - d).clamp(0.0, 1.0);
            let cell = &mut canvas[[y, x]];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

pub fn rasterize_sketch(lm: &LandmarkSet, h: usize, w: usize) -> Sketch {
    let mut canvas = Array2::<f32>::zeros((h, w));
    let pts = lm.points();
    for line in &schema().polylines {
        let idx = &line.indices;
        let n = idx.len();
        if n == 1 {
            let p = to_pixel(pts[idx[0]], h, w);
            draw_segment(&mut canvas, p, p);
            continue;
        }
        let segments = if line.closed { n } else { n - 1 };
        for s in 0..segments {
            let a = to_pixel(pts[idx[s]], h, w);
            let b = to_pixel(pts[idx[(s + 1) % n]], h, w);
            draw_segment(&mut canvas, a, b);
        }
    }
    let pixels = Array3::from_shape_fn((3, h, w), |(_, y, x)| canvas[[y, x]]);
    Sketch { pixels }
}

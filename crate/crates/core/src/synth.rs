//! Procedural talking-face clips: a cartoon face whose mouth opening follows a
//! sinusoid, paired with a tone whose pitch tracks the opening. Used for
//! smoke tests, overfit experiments, and `lap synth`.

use std::f32::consts::PI;
use std::path::Path;

use ndarray::Array3;

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::image_io;
use crate::landmarks::{FaceBox, LandmarkSequence, LandmarkSet, Point, NUM_POINTS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceParams {
    pub cx: f32,
    pub cy: f32,
    pub scale: f32,
    /// Mouth opening in `[0, 1]`.
    pub mouth_open: f32,
    pub mouth_width: f32,
    pub skin: [f32; 3],
}

impl Default for FaceParams {
    fn default() -> Self {
        Self {
            cx: 0.5,
            cy: 0.5,
            scale: 1.0,
            mouth_open: 0.3,
            mouth_width: 1.0,
            skin: [0.85, 0.66, 0.52],
        }
    }
}

fn arc(n: usize, from_deg: f32, to_deg: f32, f: impl Fn(f32) -> Point) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f32 / (n - 1) as f32 };
            f((from_deg + (to_deg - from_deg) * t) * PI / 180.0)
        })
        .collect()
}

fn ring(n: usize, f: impl Fn(f32) -> Point) -> Vec<Point> {
    (0..n).map(|i| f(2.0 * PI * i as f32 / n as f32)).collect()
}

impl FaceParams {
    fn jaw_drop(&self) -> f32 {
        0.05 * self.scale * self.mouth_open
    }

    fn mouth_center(&self) -> (f32, f32) {
        (self.cx, self.cy + 0.2 * self.scale + 0.5 * self.jaw_drop())
    }

    /// The 131 points in schema order.
    pub fn landmarks(&self) -> LandmarkSet {
        let (cx, cy, s) = (self.cx, self.cy, self.scale);
        let (rx, ry) = (0.30 * s, 0.38 * s);
        let drop = self.jaw_drop();
        let mut pts: Vec<Point> = Vec::with_capacity(NUM_POINTS);
        // jaw: lower arc, pulled down with the mouth
        pts.extend(arc(16, 20.0, 160.0, |a| {
            [cx + rx * a.cos(), cy + ry * a.sin() + drop * a.sin().powi(2)]
        }));
        // upper face contour
        pts.extend(arc(20, 170.0, 370.0, |a| [cx + rx * a.cos(), cy + ry * a.sin()]));
        for side in [-1.0f32, 1.0] {
            pts.extend(arc(8, 0.0, 180.0, |a| {
                let x = cx + side * (0.125 * s - 0.075 * s * a.cos());
                [x, cy - 0.16 * s - 0.025 * s * a.sin()]
            }));
        }
        for side in [-1.0f32, 1.0] {
            pts.extend(ring(12, |a| {
                [cx + side * 0.12 * s + 0.06 * s * a.cos(), cy - 0.08 * s + 0.025 * s * a.sin()]
            }));
        }
        pts.extend((0..6).map(|i| [cx, cy - 0.08 * s + 0.14 * s * i as f32 / 5.0]));
        pts.extend(arc(8, 200.0, 340.0, |a| {
            [cx + 0.055 * s * a.cos(), cy + 0.08 * s - 0.025 * s * a.sin()]
        }));
        let (mx, my) = self.mouth_center();
        let half_w = 0.11 * s * self.mouth_width;
        let open = self.mouth_open;
        pts.extend(ring(21, |a| {
            let h = if a.sin() < 0.0 { 0.035 * s } else { (0.035 + 0.05 * open) * s };
            [mx + half_w * a.cos(), my + h * a.sin()]
        }));
        pts.extend(ring(20, |a| {
            let h = if a.sin() < 0.0 { (0.004 + 0.012 * open) * s } else { (0.004 + 0.045 * open) * s };
            [mx + 0.75 * half_w * a.cos(), my + h * a.sin()]
        }));
        debug_assert_eq!(pts.len(), NUM_POINTS);
        LandmarkSet::new(pts).expect("synthetic landmarks are finite")
    }
}

/// Fraction of the 4x4 subsamples of pixel `(x, y)` inside the polygon.
fn coverage(poly: &[(f32, f32)], x: usize, y: usize) -> f32 {
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let px = x as f32 + (sx as f32 + 0.5) / 4.0;
            let py = y as f32 + (sy as f32 + 0.5) / 4.0;
            let mut inside = false;
            let mut j = poly.len() - 1;
            for i in 0..poly.len() {
                let (xi, yi) = poly[i];
                let (xj, yj) = poly[j];
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            hits += usize::from(inside);
        }
    }
    hits as f32 / 16.0
}

fn fill_polygon(img: &mut Array3<f32>, poly: &[(f32, f32)], color: [f32; 3]) {
    let (_, h, w) = img.dim();
    let min_x = poly.iter().map(|p| p.0).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let max_x = (poly.iter().map(|p| p.0).fold(f32::NEG_INFINITY, f32::max).ceil() as usize).min(w);
    let min_y = poly.iter().map(|p| p.1).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let max_y = (poly.iter().map(|p| p.1).fold(f32::NEG_INFINITY, f32::max).ceil() as usize).min(h);
    for y in min_y..max_y {
        for x in min_x..max_x {
            let a = coverage(poly, x, y);
            if a > 0.0 {
                for c in 0..3 {
                    img[[c, y, x]] = img[[c, y, x]] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
}

/// Renders the face into a `frame_h x frame_w` frame; landmarks are
/// interpreted relative to `face_box`.
pub fn render_frame(params: &FaceParams, frame_h: usize, frame_w: usize, face_box: FaceBox) -> Array3<f32> {
    let mut img = Array3::from_shape_fn((3, frame_h, frame_w), |(c, y, x)| {
        let t = (x + y) as f32 / (frame_h + frame_w) as f32;
        [0.25 + 0.2 * t, 0.35 + 0.1 * t, 0.45 - 0.15 * t][c]
    });
    let lm = params.landmarks();
    let (bw, bh) = (face_box.width() as f32, face_box.height() as f32);
    let to_px = |p: Point| (face_box.x0 as f32 + p[0] * bw, face_box.y0 as f32 + p[1] * bh);
    let poly = |idx: std::ops::Range<usize>| -> Vec<(f32, f32)> {
        idx.map(|i| to_px(lm.points()[i])).collect()
    };
    let skin = params.skin;
    fill_polygon(&mut img, &poly(0..36), skin);
    let shade = |k: f32| [skin[0] * k, skin[1] * k, skin[2] * k];
    // chin shadow that moves with the jaw
    let chin: Vec<(f32, f32)> = poly(3..13);
    fill_polygon(&mut img, &chin, shade(0.92));
    for brow in [36..44, 44..52] {
        let line = poly(brow);
        let mut band = line.clone();
        band.extend(line.iter().rev().map(|&(x, y)| (x, y + 0.02 * bh)));
        fill_polygon(&mut img, &band, [0.3, 0.2, 0.15]);
    }
    for eye in [52..64, 64..76] {
        let e = poly(eye);
        fill_polygon(&mut img, &e, [0.95, 0.95, 0.95]);
        let (ex, ey) = e.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0 / 12.0, acc.1 + p.1 / 12.0));
        let r = 0.022 * bw;
        let pupil: Vec<(f32, f32)> = (0..10)
            .map(|i| {
                let a = 2.0 * PI * i as f32 / 10.0;
                (ex + r * a.cos(), ey + r * a.sin())
            })
            .collect();
        fill_polygon(&mut img, &pupil, [0.15, 0.1, 0.08]);
    }
    let nose = poly(82..90);
    let mut nose_band = nose.clone();
    nose_band.extend(nose.iter().rev().map(|&(x, y)| (x, y - 0.015 * bh)));
    fill_polygon(&mut img, &nose_band, shade(0.75));
    fill_polygon(&mut img, &poly(90..111), [0.75, 0.3, 0.3]);
    fill_polygon(&mut img, &poly(111..131), [0.25, 0.05, 0.08]);
    img
}

/// Phase-continuous tone whose pitch follows the per-frame mouth opening.
pub fn tone_for_openings(openings: &[f32], fps: u32) -> AudioClip {
    let per_frame = SAMPLE_RATE as f64 / fps as f64;
    let n = (openings.len() as f64 * per_frame).round() as usize;
    let mut phase = 0.0f64;
    let samples = (0..n)
        .map(|i| {
            let f = ((i as f64 / per_frame) as usize).min(openings.len() - 1);
            let freq = 250.0 + 600.0 * openings[f] as f64;
            phase += 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
            (0.3 * phase.sin()) as f32
        })
        .collect();
    AudioClip::new(samples, SAMPLE_RATE).expect("synthetic audio is valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub fps: u32,
    pub frame_size: usize,
    pub face_size: usize,
    /// Mouth period in frames.
    pub period: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            fps: 25,
            frame_size: 96,
            face_size: 80,
            period: 11.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub frames: Vec<Array3<f32>>,
    pub landmarks: LandmarkSequence,
    pub audio: AudioClip,
    pub face_box: FaceBox,
    pub openings: Vec<f32>,
}

impl SyntheticClip {
    pub fn generate(cfg: &SynthConfig) -> Self {
        let phase = (cfg.seed % 97) as f32 * 0.37;
        let skin_tint = ((cfg.seed % 5) as f32 - 2.0) * 0.03;
        let margin = ((cfg.frame_size - cfg.face_size) / 2) as u32;
        let face_box = FaceBox::new(
            margin,
            margin,
            margin + cfg.face_size as u32,
            margin + cfg.face_size as u32,
        );
        let mut frames = Vec::with_capacity(cfg.frames);
        let mut sets = Vec::with_capacity(cfg.frames);
        let mut openings = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            let tf = t as f32;
            let open = 0.5 + 0.5 * (2.0 * PI * tf / cfg.period + phase).sin();
            let params = FaceParams {
                cx: 0.5 + 0.01 * (2.0 * PI * tf / 40.0 + phase).sin(),
                cy: 0.48 + 0.008 * (2.0 * PI * tf / 33.0).cos(),
                mouth_open: open,
                mouth_width: 1.0 + 0.08 * open,
                skin: [0.85 + skin_tint, 0.66, 0.52 - skin_tint],
                ..FaceParams::default()
            };
            frames.push(render_frame(&params, cfg.frame_size, cfg.frame_size, face_box));
            sets.push(params.landmarks());
            openings.push(open);
        }
        let audio = tone_for_openings(&openings, cfg.fps);
        Self {
            frames,
            landmarks: LandmarkSequence::new(sets, cfg.fps).expect("at least one frame"),
            audio,
            face_box,
            openings,
        }
    }

    /// Writes `frames/`, `audio.wav`, `landmarks.jsonl`, `boxes.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            image_io::write_png(&frames_dir.join(image_io::frame_file_name(i)), f)?;
        }
        self.audio.write_wav(dir.join("audio.wav"))?;
        self.landmarks.write_jsonl(dir.join("landmarks.jsonl"))?;
        let boxes = serde_json::json!({ "box": [self.face_box.x0, self.face_box.y0, self.face_box.x1, self.face_box.y1] });
        let path = dir.join("boxes.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&boxes)?).map_err(|e| Error::io(&path, e))
    }
}

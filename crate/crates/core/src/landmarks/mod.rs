//! Facial landmark schema, sequences, and JSON-lines I/O.

mod face;
mod sketch;

pub use face::{
    convex_hull, face_hull_mask, gaussian_blur, mask_lower_half, paste_back, resize_bilinear,
    smooth_face_mask, FaceBox, FaceFrame,
};
pub use sketch::{rasterize_sketch, Sketch};

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_POINTS: usize = 131;
pub const LIP_POINTS: usize = 41;
pub const JAW_POINTS: usize = 16;
pub const POSE_POINTS: usize = 74;

pub type Point = [f32; 2];

#[derive(Debug, Clone, Deserialize)]
pub struct Polyline {
    pub name: String,
    pub indices: Vec<usize>,
    pub closed: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Groups {
    pub lip: Vec<usize>,
    pub jaw: Vec<usize>,
    pub pose: Vec<usize>,
}

/// Point layout and drawing connectivity, loaded from the versioned asset.
#[derive(Debug, Clone, Deserialize)]
pub struct Schema {
    pub name: String,
    pub version: u32,
    pub num_points: usize,
    pub groups: Groups,
    pub polylines: Vec<Polyline>,
}

const SCHEMA_JSON: &str = include_str!("../../assets/landmark_schema_v1.json");

impl Schema {
    pub fn parse(json: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(json)?;
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        let g = &self.groups;
        if self.num_points != NUM_POINTS
            || g.lip.len() != LIP_POINTS
            || g.jaw.len() != JAW_POINTS
            || g.pose.len() != POSE_POINTS
        {
            return Err(Error::Schema(format!(
                "group sizes lip/jaw/pose = {}/{}/{} over {} points, expected 41/16/74 over 131",
                g.lip.len(),
                g.jaw.len(),
                g.pose.len(),
                self.num_points
            )));
        }
        let mut seen = [false; NUM_POINTS];
        for &i in g.lip.iter().chain(&g.jaw).chain(&g.pose) {
            if i >= NUM_POINTS || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Schema(format!("index {i} is out of range or repeated")));
            }
        }
        for line in &self.polylines {
            if let Some(&i) = line.indices.iter().find(|&&i| i >= NUM_POINTS) {
                return Err(Error::Schema(format!("polyline {} uses index {i}", line.name)));
            }
        }
        Ok(())
    }
}

pub fn schema() -> &'static Schema {
    static SCHEMA: OnceLock<Schema> = OnceLock::new();
    SCHEMA.get_or_init(|| Schema::parse(SCHEMA_JSON).expect("bundled landmark schema is valid"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != NUM_POINTS {
            return Err(Error::Schema(format!(
                "expected {NUM_POINTS} points, found {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn zeros() -> Self {
        Self {
            points: vec![[0.0; 2]; NUM_POINTS],
        }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<Point> {
        indices.iter().map(|&i| self.points[i]).collect()
    }

    pub fn lip(&self) -> Vec<Point> {
        self.gather(&schema().groups.lip)
    }

    pub fn jaw(&self) -> Vec<Point> {
        self.gather(&schema().groups.jaw)
    }

    pub fn pose(&self) -> Vec<Point> {
        self.gather(&schema().groups.pose)
    }

    /// Splits into (lip, jaw, pose) groups in schema order.
    pub fn split(&self) -> (Vec<Point>, Vec<Point>, Vec<Point>) {
        (self.lip(), self.jaw(), self.pose())
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }
}

/// Places each group at its schema indices; inverse of [`LandmarkSet::split`].
pub fn assemble_full(lip: &[Point], jaw: &[Point], pose: &[Point]) -> Result<LandmarkSet> {
    let g = &schema().groups;
    for (name, got, want) in [
        ("lip", lip.len(), LIP_POINTS),
        ("jaw", jaw.len(), JAW_POINTS),
        ("pose", pose.len(), POSE_POINTS),
    ] {
        if got != want {
            return Err(Error::Schema(format!("{name} group has {got} points, expected {want}")));
        }
    }
    let mut points = vec![[0.0; 2]; NUM_POINTS];
    for (idx, src) in [(&g.lip, lip), (&g.jaw, jaw), (&g.pose, pose)] {
        for (&i, &p) in idx.iter().zip(src) {
            points[i] = p;
        }
    }
    LandmarkSet::new(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    pub frames: Vec<LandmarkSet>,
    pub fps: u32,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: usize,
    points: Vec<Point>,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<LandmarkSet>, fps: u32) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Schema("no frames".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn read_jsonl(path: impl AsRef<Path>, fps: u32) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut frames = Vec::new();
        for (line_no, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Schema(format!("{} line {}: {e}", path.display(), line_no + 1))
            })?;
            if rec.frame != frames.len() {
                return Err(Error::Schema(format!(
                    "frame {}: out of order, expected frame {}",
                    rec.frame,
                    frames.len()
                )));
            }
            let set = LandmarkSet::new(rec.points)
                .map_err(|e| Error::Schema(format!("frame {}: {e}", rec.frame)))?;
            frames.push(set);
        }
        if frames.is_empty() {
            return Err(Error::Schema(format!("{}: no frames", path.display())));
        }
        Ok(Self { frames, fps })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, set) in self.frames.iter().enumerate() {
            let rec = FrameRecord {
                frame: i,
                points: set.points.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

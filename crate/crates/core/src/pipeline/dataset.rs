use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mel, AudioClip, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::image_io;
use crate::landmarks::{FaceBox, LandmarkSequence};

/// Paths of one validated clip.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipRecord {
    pub id: String,
    pub frames_dir: PathBuf,
    pub audio: PathBuf,
    pub landmarks: PathBuf,
    pub face_boxes: PathBuf,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedClip {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub records: Vec<ClipRecord>,
    pub skipped: Vec<SkippedClip>,
}

#[derive(Deserialize)]
struct BoxFile {
    #[serde(rename = "box")]
    face_box: [u32; 4],
}

pub fn read_face_box(path: &Path) -> Result<FaceBox> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let b: BoxFile = serde_json::from_str(&text)?;
    Ok(FaceBox::new(b.face_box[0], b.face_box[1], b.face_box[2], b.face_box[3]))
}

/// Record for a single clip directory, or the reason it is unusable.
pub fn validate_clip(dir: &Path, fps: u32) -> std::result::Result<ClipRecord, String> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let frames_dir = dir.join("frames");
    let audio = dir.join("audio.wav");
    let landmarks = dir.join("landmarks.jsonl");
    let face_boxes = dir.join("boxes.json");
    for (p, what) in [(&frames_dir, "frames/"), (&audio, "audio.wav"), (&landmarks, "landmarks.jsonl"), (&face_boxes, "boxes.json")] {
        if !p.exists() {
            return Err(format!("missing {what}"));
        }
    }
    let frames = image_io::list_frames(&frames_dir).map_err(|e| e.to_string())?;
    if frames.is_empty() {
        return Err("no frames".into());
    }
    let seq = LandmarkSequence::read_jsonl(&landmarks, fps).map_err(|e| e.to_string())?;
    if seq.len() != frames.len() {
        return Err(format!("count mismatch: {} frames, {} landmark records", frames.len(), seq.len()));
    }
    let clip = AudioClip::read_wav(&audio).map_err(|e| e.to_string())?;
    let video_secs = frames.len() as f64 / fps as f64;
    if (clip.duration_secs() - video_secs).abs() > 1.0 / fps as f64 + 1e-9 {
        return Err(format!(
            "audio length mismatch: {:.3} s audio vs {:.3} s video",
            clip.duration_secs(),
            video_secs
        ));
    }
    let face_box = read_face_box(&face_boxes).map_err(|e| e.to_string())?;
    let first = image_io::read_png(&frames[0]).map_err(|e| e.to_string())?;
    let (_, h, w) = first.dim();
    face_box.validate(h, w).map_err(|e| e.to_string())?;
    Ok(ClipRecord { id, frames_dir, audio, landmarks, face_boxes, num_frames: frames.len() })
}

/// Scans `<root>/<clip>/` directories. Invalid clips are reported, not dropped silently.
pub fn ingest(root: &Path, fps: u32) -> Result<IngestReport> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for dir in dirs {
        match validate_clip(&dir, fps) {
            Ok(r) => records.push(r),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", dir.display());
                skipped.push(SkippedClip {
                    id: dir.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    reason,
                })
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "no valid clips under {} (0 valid, {} skipped{})",
            root.display(),
            skipped.len(),
            skipped.iter().map(|s| format!("; {}: {}", s.id, s.reason)).collect::<String>()
        )));
    }
    Ok(IngestReport { records, skipped })
}

/// A clip fully loaded into memory.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub id: String,
    /// Full frames, `3 x H x W` in `[0,1]`.
    pub frames: Vec<Array3<f32>>,
    pub face_box: FaceBox,
    /// Landmarks normalized to the face box.
    pub landmarks: LandmarkSequence,
    pub mel: MelSpectrogram,
    pub fps: u32,
}

impl ClipData {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load(record: &ClipRecord, fps: u32, mel_cfg: &MelConfig) -> Result<Self> {
        let frames = image_io::list_frames(&record.frames_dir)?
            .iter()
            .map(|p| image_io::read_png(p))
            .collect::<Result<Vec<_>>>()?;
        let landmarks = LandmarkSequence::read_jsonl(&record.landmarks, fps)?;
        if landmarks.len() != frames.len() {
            return Err(Error::Dataset(format!("{}: count mismatch", record.id)));
        }
        let audio = AudioClip::read_wav(&record.audio)?;
        let mel = cached_mel(&record.audio, &audio, mel_cfg)?;
        Ok(Self {
            id: record.id.clone(),
            frames,
            face_box: read_face_box(&record.face_boxes)?,
            landmarks,
            mel,
            fps,
        })
    }

    /// Builds a clip from in-memory parts (used by the synthetic generator and tests).
    pub fn from_parts(
        id: &str,
        frames: Vec<Array3<f32>>,
        face_box: FaceBox,
        landmarks: LandmarkSequence,
        audio: &AudioClip,
        mel_cfg: &MelConfig,
    ) -> Result<Self> {
        if frames.len() != landmarks.len() {
            return Err(Error::Dataset(format!("{id}: count mismatch")));
        }
        let fps = landmarks.fps;
        Ok(Self {
            id: id.to_string(),
            frames,
            face_box,
            landmarks,
            mel: compute_mel(audio, mel_cfg)?,
            fps,
        })
    }
}

/// Cache directory for derived data, from `LAP_CACHE_DIR`.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("LAP_CACHE_DIR").filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn cache_key(path: &Path, audio: &AudioClip, cfg: &MelConfig) -> String {
    let mut h = 0xcbf29ce484222325u64;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
    };
    feed(path.to_string_lossy().as_bytes());
    feed(serde_json::to_string(cfg).unwrap_or_default().as_bytes());
    for s in audio.samples() {
        feed(&s.to_le_bytes());
    }
    format!("mel-{h:016x}.raw")
}

fn cached_mel(path: &Path, audio: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let Some(dir) = cache_dir() else {
        return compute_mel(audio, cfg);
    };
    let file = dir.join(cache_key(path, audio, cfg));
    if let Ok(arr) = image_io::read_array_dump(&file) {
        if let Ok(values) = arr.into_dimensionality::<ndarray::Ix2>() {
            return Ok(MelSpectrogram { values, hop_seconds: cfg.hop_seconds() });
        }
    }
    let mel = compute_mel(audio, cfg)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    image_io::write_array_dump(&file, &mel.values.clone().into_dyn())?;
    Ok(mel)
}

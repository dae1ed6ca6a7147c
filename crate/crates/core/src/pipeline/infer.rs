//! End-to-end dubbing: driving audio + source clip -> landmarks -> rendered faces -> pasted frames.

use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::{DType, Tensor};
use ndarray::Array3;
use serde::Serialize;

use super::checkpoint::{load_kind, CheckpointKind};
use super::config::RunConfig;
use super::dataset::ClipData;
use super::samples::{
    array3_to_tensor, chunks_tensor, concat_channels, context_indices, face_crop, points_tensor, sketch_pixels,
    tensor_to_array3, uniform_indices,
};
use crate::audio::{chunk_overrun_secs, compute_mel, AudioClip, MelSpectrogram};
use crate::error::{Error, Result};
use crate::generator::{GeneratorInputs, Stage1Model};
use crate::image_io;
use crate::landmarks::{
    assemble_full, mask_lower_half, paste_back, smooth_face_mask, FaceFrame, LandmarkSequence, LandmarkSet, Point,
};
use crate::nn::ParamStore;
use crate::render::{RenderBatch, Renderer};

/// Windows of `T` frames processed per stage-1 forward pass.
const WINDOWS_PER_PASS: usize = 8;

pub struct LoadedLandmarkModel {
    pub config: RunConfig,
    pub model: Stage1Model,
}

pub struct LoadedRenderer {
    pub config: RunConfig,
    pub renderer: Renderer,
}

pub fn load_landmark_model(path: &Path) -> Result<LoadedLandmarkModel> {
    let ck = load_kind(path, CheckpointKind::Landmark)?;
    let ps = ParamStore::new(ck.config.seed, DType::F32);
    let model = Stage1Model::new(&ck.config.generator, &ps.pp("model"))?;
    ps.load_tensors(&ck.tensors)?;
    Ok(LoadedLandmarkModel { config: ck.config, model })
}

pub fn load_renderer(path: &Path) -> Result<LoadedRenderer> {
    let ck = load_kind(path, CheckpointKind::Render)?;
    let ps = ParamStore::new(ck.config.seed, DType::F32);
    let renderer = Renderer::new(&ck.config.render, &ps.pp("model"))?;
    ps.load_tensors(&ck.tensors)?;
    Ok(LoadedRenderer { config: ck.config, renderer })
}

fn tensor_points(t: &Tensor) -> Result<Vec<Vec<Point>>> {
    let v = t.to_dtype(DType::F32)?.to_vec3::<f32>()?;
    Ok(v.into_iter().map(|frame| frame.into_iter().map(|p| [p[0], p[1]]).collect()).collect())
}

/// Errors when the driving audio falls short of the video by more than the allowed slack.
pub fn check_audio_length(mel: &MelSpectrogram, frames: usize, fps: u32, max_shortfall: f64) -> Result<()> {
    let over = chunk_overrun_secs(mel, frames.saturating_sub(1), fps);
    if over > max_shortfall {
        return Err(Error::Audio(format!(
            "driving audio is {over:.3} s shorter than the {frames}-frame video (limit {max_shortfall} s)"
        )));
    }
    Ok(())
}

/// Stage 1 over a whole clip in non-overlapping windows of `T`; the last window
/// is padded by repeating the final frame. Pose comes from `source`.
pub fn predict_landmarks(
    model: &Stage1Model,
    cfg: &RunConfig,
    source: &LandmarkSequence,
    mel: &MelSpectrogram,
    fps: u32,
    len: usize,
) -> Result<Vec<LandmarkSet>> {
    if len == 0 || source.len() < len {
        return Err(Error::InvalidArgument(format!("need {len} source landmark frames, have {}", source.len())));
    }
    let g = &cfg.generator;
    let seq = &source.frames;
    let ref_ids = uniform_indices(len, g.refs);
    let refs_one = Tensor::stack(
        &ref_ids.iter().map(|&i| points_tensor(seq[i].points())).collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let windows: Vec<Vec<usize>> = (0..len.div_ceil(g.frames))
        .map(|w| (0..g.frames).map(|i| (w * g.frames + i).min(len - 1)).collect())
        .collect();
    let mut out = Vec::with_capacity(len);
    for group in windows.chunks(WINDOWS_PER_PASS) {
        let mut audio = Vec::new();
        let mut pose = Vec::new();
        for w in group {
            audio.push(chunks_tensor(mel, w, fps)?);
            let p = w.iter().map(|&i| points_tensor(&seq[i].pose())).collect::<Result<Vec<_>>>()?;
            pose.push(Tensor::stack(&p, 0)?);
        }
        let refs = refs_one.unsqueeze(0)?.repeat((group.len(), 1, 1, 1))?;
        let pred = model.forward(&GeneratorInputs {
            audio: Tensor::stack(&audio, 0)?,
            pose: Tensor::stack(&pose, 0)?,
            refs,
        })?;
        for (b, w) in group.iter().enumerate() {
            let lips = tensor_points(&pred.lip.get(b)?)?;
            let jaws = tensor_points(&pred.jaw.get(b)?)?;
            for (i, &f) in w.iter().enumerate() {
                if out.len() == len || f < out.len() {
                    continue;
                }
                out.push(assemble_full(&lips[i], &jaws[i], &seq[f].pose())?);
            }
        }
    }
    Ok(out)
}

/// Reference count used at inference for a clip of `len` frames.
pub fn inference_ref_count(len: usize, fraction: f64) -> usize {
    ((len as f64 * fraction).ceil() as usize).clamp(1, len.max(1))
}

/// Renders face crops for every frame from predicted landmarks.
pub fn render_faces(
    renderer: &Renderer,
    clip: &ClipData,
    predicted: &[LandmarkSet],
    mel: &MelSpectrogram,
    num_refs: usize,
    batch_size: usize,
) -> Result<Vec<Array3<f32>>> {
    let rc = renderer.config();
    let size = rc.image_size;
    let len = clip.len();
    if predicted.len() != len {
        return Err(Error::InvalidArgument(format!("{} predicted landmark frames for {len} video frames", predicted.len())));
    }
    let crops: Vec<Array3<f32>> = clip.frames.iter().map(|f| face_crop(f, clip, size)).collect();
    let sketches: Vec<Array3<f32>> = predicted.iter().map(|lm| sketch_pixels(lm, size)).collect();
    let ref_ids = uniform_indices(len, num_refs);
    let ref_imgs = Tensor::stack(&ref_ids.iter().map(|&r| array3_to_tensor(&crops[r])).collect::<Result<Vec<_>>>()?, 0)?;
    let ref_sks = Tensor::stack(
        &ref_ids
            .iter()
            .map(|&r| array3_to_tensor(&sketch_pixels(&clip.landmarks.frames[r], size)))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let mut faces = Vec::with_capacity(len);
    let frames: Vec<usize> = (0..len).collect();
    for chunk in frames.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let masked = chunk
            .iter()
            .map(|&t| array3_to_tensor(&mask_lower_half(&FaceFrame::new(crops[t].clone())).pixels))
            .collect::<Result<Vec<_>>>()?;
        let target = chunk
            .iter()
            .map(|&t| {
                let ctx: Vec<&Array3<f32>> = context_indices(t, rc.context, len).into_iter().map(|i| &sketches[i]).collect();
                concat_channels(&ctx)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = RenderBatch {
            masked_face: Tensor::stack(&masked, 0)?,
            target_sketches: Tensor::stack(&target, 0)?,
            ref_images: ref_imgs.unsqueeze(0)?.repeat((b, 1, 1, 1, 1))?,
            ref_sketches: ref_sks.unsqueeze(0)?.repeat((b, 1, 1, 1, 1))?,
            audio: chunks_tensor(mel, chunk, clip.fps)?,
        };
        let out = renderer.forward(&batch)?;
        for i in 0..b {
            faces.push(tensor_to_array3(&out.image.get(i)?)?);
        }
    }
    Ok(faces)
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    pub landmarks: Vec<LandmarkSet>,
    /// Generated face crops at the render resolution.
    pub faces: Vec<Array3<f32>>,
    /// Source frames with the generated face pasted in.
    pub frames: Vec<Array3<f32>>,
    pub num_refs: usize,
}

/// Full pipeline on an in-memory clip. `num_refs` overrides the configured fraction.
pub fn infer_clip(
    stage1: &LoadedLandmarkModel,
    stage2: &LoadedRenderer,
    clip: &ClipData,
    driving: &AudioClip,
    num_refs: Option<usize>,
) -> Result<InferOutput> {
    let cfg = &stage2.config;
    let mel = compute_mel(driving, &cfg.mel)?;
    check_audio_length(&mel, clip.len(), clip.fps, cfg.data.max_audio_shortfall_secs)?;
    let landmarks = predict_landmarks(&stage1.model, &stage1.config, &clip.landmarks, &mel, clip.fps, clip.len())?;
    let n = num_refs.unwrap_or_else(|| inference_ref_count(clip.len(), cfg.infer.ref_fraction));
    let faces = render_faces(&stage2.renderer, clip, &landmarks, &mel, n, cfg.infer.batch_size)?;
    let size = stage2.renderer.config().image_size;
    let sigma = (cfg.infer.mask_sigma_fraction * size as f64) as f32;
    let frames = faces
        .iter()
        .zip(&landmarks)
        .zip(&clip.frames)
        .map(|((face, lm), src)| {
            let mask = smooth_face_mask(lm, size, size, sigma);
            paste_back(&FaceFrame::new(face.clone()), src, clip.face_box, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferOutput { landmarks, faces, frames, num_refs: n })
}

#[derive(Debug, Clone, Serialize)]
pub struct InferReport {
    pub frames: usize,
    pub num_refs: usize,
    pub out_dir: PathBuf,
    pub video: Option<PathBuf>,
}

/// Writes `frames/*.png`, `faces/*.png`, `landmarks.jsonl` and, with `raw`, exact float dumps.
pub fn write_outputs(out: &InferOutput, dir: &Path, fps: u32, raw: bool) -> Result<()> {
    for (sub, imgs) in [("frames", &out.frames), ("faces", &out.faces)] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, img) in imgs.iter().enumerate() {
            image_io::write_png(&d.join(image_io::frame_file_name(i)), img)?;
            if raw {
                let name = image_io::frame_file_name(i).replace(".png", ".raw");
                image_io::write_array_dump(&d.join(name), &img.clone().into_dyn())?;
            }
        }
    }
    LandmarkSequence::new(out.landmarks.clone(), fps)?.write_jsonl(dir.join("landmarks.jsonl"))
}

/// Muxes frames and audio with an external `ffmpeg`, if present.
pub fn mux_video(frames_dir: &Path, audio: &Path, fps: u32, out: &Path) -> Result<()> {
    let status = Command::new("ffmpeg")
        .args(["-y", "-loglevel", "error", "-framerate", &fps.to_string(), "-i"])
        .arg(frames_dir.join("%06d.png"))
        .arg("-i")
        .arg(audio)
        .args(["-c:v", "libx264", "-pix_fmt", "yuv420p", "-shortest"])
        .arg(out)
        .status()
        .map_err(|e| Error::InvalidArgument(format!("could not run ffmpeg: {e}")))?;
    if !status.success() {
        return Err(Error::InvalidArgument(format!("ffmpeg exited with {status}")));
    }
    Ok(())
}

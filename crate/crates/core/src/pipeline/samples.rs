//! Conversions from clip data to model-ready tensors.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};

use super::dataset::ClipData;
use crate::audio::{chunk_for_frame, MelSpectrogram};
use crate::error::{Error, Result};
use crate::landmarks::{mask_lower_half, rasterize_sketch, resize_bilinear, FaceFrame, LandmarkSet, Point};

pub fn array3_to_tensor(a: &Array3<f32>) -> Result<Tensor> {
    let a = a.as_standard_layout();
    Ok(Tensor::from_slice(a.as_slice().expect("standard layout"), a.dim(), &Device::Cpu)?)
}

pub fn array2_to_tensor(a: &Array2<f32>) -> Result<Tensor> {
    let a = a.as_standard_layout();
    Ok(Tensor::from_slice(a.as_slice().expect("standard layout"), a.dim(), &Device::Cpu)?)
}

/// `(3, H, W)` tensor back to an array.
pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let dims = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec(dims, v).map_err(|e| Error::Shape(e.to_string()))
}

/// Points as a `(n, 2)` tensor.
pub fn points_tensor(points: &[Point]) -> Result<Tensor> {
    let flat: Vec<f32> = points.iter().flat_map(|p| [p[0], p[1]]).collect();
    Ok(Tensor::from_vec(flat, (points.len(), 2), &Device::Cpu)?)
}

/// Stacked mel chunks `(n, 16, 80)` for the given frame indices.
pub fn chunks_tensor(mel: &MelSpectrogram, frames: &[usize], fps: u32) -> Result<Tensor> {
    let chunks = frames
        .iter()
        .map(|&f| array2_to_tensor(&chunk_for_frame(mel, f, fps).values))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&chunks, 0)?)
}

/// `n` indices spread at a uniform stride over `0..len`.
pub fn uniform_indices(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| (i * len) / n.max(1)).map(|i| i.min(len.saturating_sub(1))).collect()
}

/// Frame indices `t-k..=t+k`, clamped to the clip.
pub fn context_indices(t: usize, k: usize, len: usize) -> Vec<usize> {
    (0..=2 * k)
        .map(|i| (t as isize + i as isize - k as isize).clamp(0, len as isize - 1) as usize)
        .collect()
}

/// Face crops, sketches and masked crops of one clip at the render resolution.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub crops: Vec<Array3<f32>>,
    pub sketches: Vec<Array3<f32>>,
    pub masked: Vec<Array3<f32>>,
}

pub fn face_crop(frame: &Array3<f32>, clip: &ClipData, size: usize) -> Array3<f32> {
    resize_bilinear(&clip.face_box.crop(frame), size, size)
}

pub fn sketch_pixels(lm: &LandmarkSet, size: usize) -> Array3<f32> {
    rasterize_sketch(lm, size, size).pixels
}

impl PreparedClip {
    pub fn new(clip: &ClipData, size: usize) -> Self {
        let crops: Vec<Array3<f32>> = clip.frames.iter().map(|f| face_crop(f, clip, size)).collect();
        let masked = crops.iter().map(|c| mask_lower_half(&FaceFrame::new(c.clone())).pixels).collect();
        let sketches = clip.landmarks.frames.iter().map(|lm| sketch_pixels(lm, size)).collect();
        Self { crops, sketches, masked }
    }
}

/// Channel-concatenation of several `(3, H, W)` arrays into one tensor `(3n, H, W)`.
pub fn concat_channels(items: &[&Array3<f32>]) -> Result<Tensor> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    let cat = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    array3_to_tensor(&cat)
}

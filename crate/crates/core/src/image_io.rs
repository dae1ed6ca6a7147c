//! PNG frames and raw array dumps.
//!
//! Raw dumps are a single JSON header line (`{"dtype":"f32","shape":[..]}`)
//! followed by little-endian `f32` data.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Numbered PNG files in a directory, sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads an RGB image as `3 x H x W` in `[0,1]`.
pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        raw[(y * w as usize + x) * 3 + c] as f32 / 255.0
    }))
}

pub fn write_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {c}")));
    }
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                raw[(y * w + x) * 3 + ch] = (pixels[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches dimensions")
        .save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    dtype: String,
    shape: Vec<usize>,
}

pub fn write_array_dump(path: &Path, array: &ArrayD<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let header = DumpHeader {
        dtype: "f32".into(),
        shape: array.shape().to_vec(),
    };
    serde_json::to_writer(&mut f, &header)?;
    let mut bytes = Vec::with_capacity(array.len() * 4 + 1);
    bytes.push(b'\n');
    for v in array.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_array_dump(path: &Path) -> Result<ArrayD<f32>> {
    let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: DumpHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f32" {
        return Err(Error::Image(format!("unsupported dump dtype {}", header.dtype)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Image(format!(
            "{}: expected {} bytes of data, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&header.shape), data).map_err(|e| Error::Image(e.to_string()))
}

//! Frame metrics between a predicted clip directory and ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image_io;
use crate::landmarks::LandmarkSequence;
use crate::losses::{lip_lmd, psnr, ssim};

/// Landmarks are normalized to the face box, whose diagonal is therefore sqrt(2).
pub const NORMALIZED_FACE_DIAG: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Serialize)]
pub struct FrameScore {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lip_lmd: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub scorers: BTreeMap<String, serde_json::Value>,
    pub per_frame: Vec<FrameScore>,
}

/// External scorer: `cmd <pred_frames> <gt_frames>` printing JSON on stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub name: String,
    pub command: String,
}

impl std::str::FromStr for Scorer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once('=') {
            Some((n, c)) if !n.is_empty() && !c.trim().is_empty() => Ok(Self { name: n.into(), command: c.into() }),
            _ => Err(format!("expected NAME=COMMAND, got `{s}`")),
        }
    }
}

fn frames_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("frames");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn run_scorer(s: &Scorer, pred: &Path, gt: &Path) -> Result<serde_json::Value> {
    let mut parts = s.command.split_whitespace();
    let program = parts.next().expect("non-empty command");
    let out = Command::new(program)
        .args(parts)
        .arg(pred)
        .arg(gt)
        .output()
        .map_err(|e| Error::InvalidArgument(format!("scorer {}: {e}", s.name)))?;
    if !out.status.success() {
        return Err(Error::InvalidArgument(format!(
            "scorer {} failed: {}",
            s.name,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    serde_json::from_slice(&out.stdout)
        .map_err(|e| Error::InvalidArgument(format!("scorer {} printed invalid JSON: {e}", s.name)))
}

pub fn evaluate(pred: &Path, gt: &Path, fps: u32, scorers: &[Scorer]) -> Result<EvalReport> {
    let (pd, gd) = (frames_dir(pred), frames_dir(gt));
    let pf = image_io::list_frames(&pd)?;
    let gf = image_io::list_frames(&gd)?;
    if pf.is_empty() || pf.len() != gf.len() {
        return Err(Error::Dataset(format!(
            "frame counts differ or are zero: {} predicted, {} ground truth",
            pf.len(),
            gf.len()
        )));
    }
    let mut per_frame = Vec::with_capacity(pf.len());
    for (i, (p, g)) in pf.iter().zip(&gf).enumerate() {
        let (a, b) = (image_io::read_png(p)?, image_io::read_png(g)?);
        per_frame.push(FrameScore { index: i, psnr: psnr(&a, &b)?, ssim: ssim(&a, &b)? });
    }
    let n = per_frame.len() as f64;
    let (plm, glm) = (pred.join("landmarks.jsonl"), gt.join("landmarks.jsonl"));
    let lip_lmd = if plm.exists() && glm.exists() {
        let (ps, gs) = (LandmarkSequence::read_jsonl(&plm, fps)?, LandmarkSequence::read_jsonl(&glm, fps)?);
        if ps.len() != gs.len() {
            return Err(Error::Dataset(format!("landmark counts differ: {} vs {}", ps.len(), gs.len())));
        }
        let total = ps
            .frames
            .iter()
            .zip(&gs.frames)
            .map(|(a, b)| lip_lmd(&a.lip(), &b.lip(), NORMALIZED_FACE_DIAG))
            .sum::<Result<f64>>()?;
        Some(total / ps.len() as f64)
    } else {
        None
    };
    let scorers = scorers
        .iter()
        .map(|s| Ok((s.name.clone(), run_scorer(s, &pd, &gd)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalReport {
        frames: per_frame.len(),
        psnr: per_frame.iter().map(|f| f.psnr).sum::<f64>() / n,
        ssim: per_frame.iter().map(|f| f.ssim).sum::<f64>() / n,
        lip_lmd,
        scorers,
        per_frame,
    })
}

//! Stage-1 and stage-2 training loops with JSON-lines logs and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{self, Checkpoint, CheckpointKind};
use super::config::{PerceptualKind, RunConfig};
use super::dataset::ClipData;
use super::samples::{chunks_tensor, concat_channels, context_indices, points_tensor, PreparedClip};
use crate::error::{Error, Result};
use crate::generator::{landmark_error, loss_continuity, loss_l1, GeneratorInputs, LandmarkPrediction, Stage1Model};
use crate::losses::{
    ls_discriminator_loss, stage2_loss, stage2_terms, IdentityBackend, PatchDiscriminator, PerceptualBackend,
    RandomConvPyramid,
};
use crate::nn::{Adam, ParamStore};
use crate::render::{RenderBatch, Renderer};

const MODEL: &str = "model";
const OPT: &str = "opt.";
const DISC: &str = "disc";
const DISC_OPT: &str = "dopt.";

/// Batch-sampling RNG for a given step, independent of how many steps ran before.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Picks `n` frames outside `exclude`, without replacement when possible.
fn pick_refs(rng: &mut ChaCha8Rng, len: usize, exclude: std::ops::Range<usize>, n: usize) -> Vec<usize> {
    let pool: Vec<usize> = (0..len).filter(|i| !exclude.contains(i)).collect();
    let pool = if pool.is_empty() { (0..len).collect() } else { pool };
    if pool.len() >= n {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Appends JSON records to a log file.
pub struct JsonLog {
    file: std::fs::File,
    path: PathBuf,
}

impl JsonLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stage1Losses {
    pub step: u64,
    pub loss: f64,
    pub l1: f64,
    pub continuity: f64,
}

/// One stage-1 batch: model inputs plus ground truth.
#[derive(Debug, Clone)]
pub struct Stage1Batch {
    pub inputs: GeneratorInputs,
    pub target: LandmarkPrediction,
}

pub struct Stage1Trainer {
    cfg: RunConfig,
    clips: Vec<ClipData>,
    ps: ParamStore,
    model: Stage1Model,
    opt: Adam,
    step: u64,
}

impl Stage1Trainer {
    pub fn new(cfg: RunConfig, clips: Vec<ClipData>) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.generator.frames;
        if clips.is_empty() || clips.iter().any(|c| c.len() < t) {
            return Err(Error::Dataset(format!("stage 1 needs clips of at least {t} frames")));
        }
        let ps = ParamStore::new(cfg.seed, DType::F32);
        let model = Stage1Model::new(&cfg.generator, &ps.pp(MODEL))?;
        let opt = Adam::new(ps.vars(), cfg.stage1.optimizer)?;
        Ok(Self { cfg, clips, ps, model, opt, step: 0 })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(ck: &Checkpoint, clips: Vec<ClipData>) -> Result<Self> {
        if ck.kind != CheckpointKind::Landmark {
            return Err(Error::Checkpoint("expected a landmark checkpoint".into()));
        }
        let mut tr = Self::new(ck.config.clone(), clips)?;
        tr.ps.load_tensors(&ck.tensors)?;
        tr.opt.load_state(OPT, &ck.tensors, ck.step)?;
        tr.step = ck.step;
        Ok(tr)
    }

    pub fn model(&self) -> &Stage1Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_lr(lr);
    }

    pub fn sample_batch(&self, step: u64) -> Result<Stage1Batch> {
        let g = &self.cfg.generator;
        let mut rng = step_rng(self.cfg.seed, step);
        let (mut audio, mut pose, mut refs, mut lip, mut jaw) = (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..self.cfg.stage1.batch_size {
            let clip = &self.clips[rng.random_range(0..self.clips.len())];
            let start = rng.random_range(0..=clip.len() - g.frames);
            let frames: Vec<usize> = (start..start + g.frames).collect();
            let ref_ids = pick_refs(&mut rng, clip.len(), start..start + g.frames, g.refs);
            let seq = &clip.landmarks.frames;
            audio.push(chunks_tensor(&clip.mel, &frames, clip.fps)?);
            let stack = |f: &dyn Fn(&crate::landmarks::LandmarkSet) -> Vec<crate::landmarks::Point>, ids: &[usize]| -> Result<Tensor> {
                let ts = ids.iter().map(|&i| points_tensor(&f(&seq[i]))).collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(&ts, 0)?)
            };
            pose.push(stack(&|s| s.pose(), &frames)?);
            lip.push(stack(&|s| s.lip(), &frames)?);
            jaw.push(stack(&|s| s.jaw(), &frames)?);
            refs.push(stack(&|s| s.points().to_vec(), &ref_ids)?);
        }
        Ok(Stage1Batch {
            inputs: GeneratorInputs {
                audio: Tensor::stack(&audio, 0)?,
                pose: Tensor::stack(&pose, 0)?,
                refs: Tensor::stack(&refs, 0)?,
            },
            target: LandmarkPrediction { lip: Tensor::stack(&lip, 0)?, jaw: Tensor::stack(&jaw, 0)? },
        })
    }

    /// `(total, l1, continuity)` on a batch without updating anything.
    pub fn losses(&self, batch: &Stage1Batch) -> Result<(Tensor, Tensor, Tensor)> {
        let pred = self.model.forward(&batch.inputs)?;
        let l1 = loss_l1(&pred, &batch.target)?;
        let lc = loss_continuity(&pred, &batch.target)?;
        let total = (&l1 + (&lc * self.cfg.stage1.lambda_continuity)?)?;
        Ok((total, l1, lc))
    }

    /// One optimizer step on a given batch; returns the losses before the update.
    pub fn train_on(&mut self, batch: &Stage1Batch) -> Result<Stage1Losses> {
        let (total, l1, lc) = self.losses(batch)?;
        let loss = scalar(&total)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step as usize });
        }
        self.opt.backward_step(&total)?;
        self.step += 1;
        Ok(Stage1Losses { step: self.step, loss, l1: scalar(&l1)?, continuity: scalar(&lc)? })
    }

    pub fn train_step(&mut self) -> Result<Stage1Losses> {
        let batch = self.sample_batch(self.step)?;
        self.train_on(&batch)
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.ps.named_tensors().into_iter().collect();
        out.extend(self.opt.state_tensors(OPT));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CheckpointKind::Landmark, self.step, &self.cfg, &self.checkpoint_tensors())
    }

    /// Landmark error (pixels at `canvas`) of the full inference procedure on a training clip.
    pub fn evaluate(&self, clip: usize, canvas: usize) -> Result<f64> {
        let c = &self.clips[clip];
        let pred = super::infer::predict_landmarks(&self.model, &self.cfg, &c.landmarks, &c.mel, c.fps, c.len())?;
        landmark_error(&pred, &c.landmarks.frames, canvas)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn is_due(step: u64, every: usize) -> bool {
    every > 0 && step % every as u64 == 0
}

/// Runs stage 1 to `cfg.stage1.steps`, logging and checkpointing under `out_dir`.
pub fn run_stage1(cfg: RunConfig, clips: Vec<ClipData>, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tr = match resume {
        Some(p) => Stage1Trainer::resume(&checkpoint::load(p)?, clips)?,
        None => Stage1Trainer::new(cfg.clone(), clips)?,
    };
    let log_path = out_dir.join("landmark_log.jsonl");
    let mut log = JsonLog::create(&log_path, resume.is_some())?;
    let total = tr.cfg.stage1.steps as u64;
    let mut last = f64::NAN;
    while tr.step < total {
        let losses = match tr.train_step() {
            Ok(l) => l,
            Err(Error::NonFiniteLoss { step }) => {
                log.write(&serde_json::json!({ "step": step, "error": "non-finite loss" }))?;
                tr.save(&out_dir.join(format!("landmark_abort_{step}.safetensors")))?;
                return Err(Error::NonFiniteLoss { step });
            }
            Err(e) => return Err(e),
        };
        last = losses.loss;
        if is_due(tr.step, tr.cfg.stage1.log_every) || tr.step == total {
            log.write(&losses)?;
        }
        if is_due(tr.step, tr.cfg.stage1.checkpoint_every) {
            tr.save(&out_dir.join(format!("landmark_{:07}.safetensors", tr.step)))?;
        }
    }
    let ck = out_dir.join("landmark.safetensors");
    tr.save(&ck)?;
    Ok(TrainSummary { steps: tr.step, final_loss: last, checkpoint: ck, log: log_path })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stage2Losses {
    pub step: u64,
    pub loss: f64,
    pub warp: f64,
    pub recon: f64,
    pub style: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub discriminator: f64,
}

#[derive(Debug, Clone)]
pub struct Stage2Batch {
    pub batch: RenderBatch,
    pub target: Tensor,
}

pub fn make_backend(kind: PerceptualKind, dtype: DType) -> Result<Box<dyn PerceptualBackend>> {
    Ok(match kind {
        PerceptualKind::RandomPyramid => Box::new(RandomConvPyramid::default_for(dtype)?),
        PerceptualKind::Identity => Box::new(IdentityBackend),
    })
}

pub struct Stage2Trainer {
    cfg: RunConfig,
    clips: Vec<ClipData>,
    prepared: Vec<PreparedClip>,
    ps: ParamStore,
    renderer: Renderer,
    disc_ps: ParamStore,
    disc: PatchDiscriminator,
    backend: Box<dyn PerceptualBackend>,
    opt: Adam,
    dopt: Adam,
    step: u64,
}

impl Stage2Trainer {
    pub fn new(cfg: RunConfig, clips: Vec<ClipData>) -> Result<Self> {
        cfg.validate()?;
        if clips.is_empty() {
            return Err(Error::Dataset("stage 2 needs at least one clip".into()));
        }
        let size = cfg.render.image_size;
        let prepared = clips.iter().map(|c| PreparedClip::new(c, size)).collect();
        let ps = ParamStore::new(cfg.seed, DType::F32);
        let renderer = Renderer::new(&cfg.render, &ps.pp(MODEL))?;
        let disc_ps = ParamStore::new(cfg.seed ^ 0xd15c, DType::F32);
        let disc = PatchDiscriminator::new(&cfg.stage2.discriminator, &disc_ps.pp(DISC))?;
        let backend = make_backend(cfg.stage2.perceptual, DType::F32)?;
        let opt = Adam::new(ps.vars(), cfg.stage2.optimizer)?;
        let dopt = Adam::new(disc_ps.vars(), cfg.stage2.disc_optimizer)?;
        Ok(Self { cfg, clips, prepared, ps, renderer, disc_ps, disc, backend, opt, dopt, step: 0 })
    }

    pub fn resume(ck: &Checkpoint, clips: Vec<ClipData>) -> Result<Self> {
        if ck.kind != CheckpointKind::Render {
            return Err(Error::Checkpoint("expected a render checkpoint".into()));
        }
        let mut tr = Self::new(ck.config.clone(), clips)?;
        tr.ps.load_tensors(&ck.tensors)?;
        tr.disc_ps.load_tensors(&ck.tensors)?;
        tr.opt.load_state(OPT, &ck.tensors, ck.step)?;
        tr.dopt.load_state(DISC_OPT, &ck.tensors, ck.step)?;
        tr.step = ck.step;
        Ok(tr)
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn clips(&self) -> &[ClipData] {
        &self.clips
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn sample_batch(&self, step: u64) -> Result<Stage2Batch> {
        let mut rng = step_rng(self.cfg.seed, step);
        let k = self.cfg.render.context;
        let n = self.cfg.stage2.train_refs;
        let (mut masked, mut sketches, mut ref_imgs, mut ref_sks, mut audio, mut target) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..self.cfg.stage2.batch_size {
            let ci = rng.random_range(0..self.clips.len());
            let (clip, prep) = (&self.clips[ci], &self.prepared[ci]);
            let t = rng.random_range(0..clip.len());
            let refs = pick_refs(&mut rng, clip.len(), t..t + 1, n);
            let ctx: Vec<&_> = context_indices(t, k, clip.len()).into_iter().map(|i| &prep.sketches[i]).collect();
            masked.push(super::samples::array3_to_tensor(&prep.masked[t])?);
            sketches.push(concat_channels(&ctx)?);
            target.push(super::samples::array3_to_tensor(&prep.crops[t])?);
            let ri = refs.iter().map(|&r| super::samples::array3_to_tensor(&prep.crops[r])).collect::<Result<Vec<_>>>()?;
            let rs = refs.iter().map(|&r| super::samples::array3_to_tensor(&prep.sketches[r])).collect::<Result<Vec<_>>>()?;
            ref_imgs.push(Tensor::stack(&ri, 0)?);
            ref_sks.push(Tensor::stack(&rs, 0)?);
            audio.push(chunks_tensor(&clip.mel, &[t], clip.fps)?.squeeze(0)?);
        }
        Ok(Stage2Batch {
            batch: RenderBatch {
                masked_face: Tensor::stack(&masked, 0)?,
                target_sketches: Tensor::stack(&sketches, 0)?,
                ref_images: Tensor::stack(&ref_imgs, 0)?,
                ref_sketches: Tensor::stack(&ref_sks, 0)?,
                audio: Tensor::stack(&audio, 0)?,
            },
            target: Tensor::stack(&target, 0)?,
        })
    }

    /// Generator objective and the generated image for a batch.
    pub fn generator_loss(&self, b: &Stage2Batch) -> Result<(Tensor, crate::losses::Stage2Terms, Tensor)> {
        let out = self.renderer.forward(&b.batch)?;
        let terms = stage2_terms(&out.image, &out.agg_image, &b.target, self.backend.as_ref(), &self.disc, self.cfg.stage2.style_reduction)?;
        let loss = stage2_loss(&terms, &self.cfg.stage2.weights)?;
        Ok((loss, terms, out.image))
    }

    /// Generator update followed by a discriminator update; losses are pre-update values.
    pub fn train_on(&mut self, b: &Stage2Batch) -> Result<Stage2Losses> {
        let (loss, terms, image) = self.generator_loss(b)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step as usize });
        }
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        let real = self.disc.forward(&b.target)?;
        let fake = self.disc.forward(&image.detach())?;
        let dloss = ls_discriminator_loss(&real, &fake)?;
        let dvalue = scalar(&dloss)?;
        self.dopt.backward_step(&dloss)?;
        self.step += 1;
        Ok(Stage2Losses {
            step: self.step,
            loss: value,
            warp: scalar(&terms.warp)?,
            recon: scalar(&terms.recon)?,
            style: scalar(&terms.style)?,
            adversarial: scalar(&terms.adversarial)?,
            feature_matching: scalar(&terms.feature_matching)?,
            discriminator: dvalue,
        })
    }

    pub fn train_step(&mut self) -> Result<Stage2Losses> {
        let batch = self.sample_batch(self.step)?;
        self.train_on(&batch)
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.ps.named_tensors().into_iter().collect();
        out.extend(self.disc_ps.named_tensors());
        out.extend(self.opt.state_tensors(OPT));
        out.extend(self.dopt.state_tensors(DISC_OPT));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CheckpointKind::Render, self.step, &self.cfg, &self.checkpoint_tensors())
    }
}

/// Runs stage 2 to `cfg.stage2.steps`, logging and checkpointing under `out_dir`.
pub fn run_stage2(cfg: RunConfig, clips: Vec<ClipData>, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tr = match resume {
        Some(p) => Stage2Trainer::resume(&checkpoint::load(p)?, clips)?,
        None => Stage2Trainer::new(cfg, clips)?,
    };
    let log_path = out_dir.join("render_log.jsonl");
    let mut log = JsonLog::create(&log_path, resume.is_some())?;
    let total = tr.cfg.stage2.steps as u64;
    let mut last = f64::NAN;
    while tr.step < total {
        let losses = match tr.train_step() {
            Ok(l) => l,
            Err(Error::NonFiniteLoss { step }) => {
                log.write(&serde_json::json!({ "step": step, "error": "non-finite loss" }))?;
                tr.save(&out_dir.join(format!("render_abort_{step}.safetensors")))?;
                return Err(Error::NonFiniteLoss { step });
            }
            Err(e) => return Err(e),
        };
        last = losses.loss;
        if is_due(tr.step, tr.cfg.stage2.log_every) || tr.step == total {
            log.write(&losses)?;
        }
        if is_due(tr.step, tr.cfg.stage2.checkpoint_every) {
            tr.save(&out_dir.join(format!("render_{:07}.safetensors", tr.step)))?;
        }
    }
    let ck = out_dir.join("render.safetensors");
    tr.save(&ck)?;
    Ok(TrainSummary { steps: tr.step, final_loss: last, checkpoint: ck, log: log_path })
}

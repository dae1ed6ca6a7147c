//! Acceptance runner. Prints one PASS/FAIL line per criterion.
//!
//! Exits non-zero on failure only when `LAP_ACCEPTANCE_STRICT=1`. Set
//! `LAP_ACCEPTANCE_ONLY=C1,C3` to run a subset.

mod common;

mod props {
    include!("common/properties.rs");
}

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{small_config, synthetic_clip};
use lap::audio::{compute_mel, AudioClip, MelConfig};
use lap::generator::{loss_l1, stage1_loss, Backbone, GeneratorConfig, GeneratorInputs, LandmarkGenerator, LandmarkPrediction};
use lap::image_io::read_array_dump;
use lap::losses::{ls_discriminator_loss, psnr, ssim, stage2_loss, stage2_terms, DiscriminatorConfig, IdentityBackend, LossWeights, PatchDiscriminator, Reduction};
use lap::nn::ParamStore;
use lap::pipeline::config::{PerceptualKind, RunConfig};
use lap::pipeline::dataset::ClipData;
use lap::pipeline::infer::render_faces;
use lap::pipeline::samples::face_crop;
use lap::pipeline::train::{Stage1Trainer, Stage2Trainer};
use lap::render::{aggregate, RenderBatch, RenderConfig, Renderer};
use lap::synth::{SynthConfig, SyntheticClip};

const STAGE1_GRAD_STEP: f64 = 1e-3;
// the stage-2 objective is piecewise smooth (L1 terms, leaky ReLU, bilinear taps), so it needs a finer step
const STAGE2_GRAD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-2;

const STAGE1_MAX_STEPS: u64 = 5000;
const STAGE1_CANVAS: usize = 128;
const STAGE1_TARGET_PX: f64 = 1.0;
const STAGE1_EVAL_EVERY: u64 = 250;

const STAGE2_MAX_STEPS: u64 = 10_000;
const STAGE2_SIZE: usize = 64;
const STAGE2_FRAMES: usize = 32;
const STAGE2_TARGET_PSNR: f64 = 25.0;
const STAGE2_TARGET_SSIM: f64 = 0.85;
const STAGE2_EVAL_EVERY: u64 = 250;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Models trained once and shared by later criteria.
#[derive(Default)]
struct Shared {
    dir: Option<tempfile::TempDir>,
    stage1: Option<(PathBuf, String)>,
    stage2: Option<Stage2Run>,
}

struct Stage2Run {
    trainer: Stage2Trainer,
    checkpoint: PathBuf,
    clip_dir: PathBuf,
    reached: bool,
}

impl Shared {
    fn dir(&mut self) -> &Path {
        self.dir.get_or_insert_with(|| tempfile::tempdir().unwrap()).path()
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn to_f64(t: &Tensor) -> Tensor {
    t.to_dtype(DType::F64).unwrap()
}

// ---------------------------------------------------------------- C1

fn c1_invariants() -> Outcome {
    let start = Instant::now();
    let mut failed = vec![];
    for (name, check) in props::PROPERTIES {
        if catch_unwind(check).is_err() {
            failed.push(*name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let n = props::PROPERTIES.len();
    outcome(
        failed.is_empty() && secs < 120.0,
        format!("{}/{n} properties hold in {secs:.1} s (limit 120 s){}", n - failed.len(), if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }),
    )
}

// ---------------------------------------------------------------- C2

struct GradReport {
    tensors: usize,
    worst: f64,
    worst_name: String,
}

/// Directional central differences against backprop, one random direction per parameter tensor.
fn grad_check(ps: &ParamStore, loss_fn: &dyn Fn() -> Tensor, step: f64, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = loss_fn().backward().unwrap();
    let mut report = GradReport { tensors: 0, worst: 0.0, worst_name: String::new() };
    for (name, var) in ps.vars() {
        let original = var.as_tensor().copy().unwrap();
        let dims = original.dims().to_vec();
        let n: usize = dims.iter().product();
        let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dir = Tensor::from_vec(dir, dims.as_slice(), &Device::Cpu).unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => scalar(&(g * &dir).unwrap().sum_all().unwrap()),
            None => 0.0,
        };
        var.set(&(&original + (&dir * step).unwrap()).unwrap()).unwrap();
        let plus = scalar(&loss_fn());
        var.set(&(&original - (&dir * step).unwrap()).unwrap()).unwrap();
        let minus = scalar(&loss_fn());
        var.set(&original).unwrap();
        let numeric = (plus - minus) / (2.0 * step);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-8 { 0.0 } else { (analytic - numeric).abs() / scale };
        report.tensors += 1;
        if rel > report.worst {
            report.worst = rel;
            report.worst_name = name;
        }
    }
    report
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize], mean: f64, std: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); mean + std * z }).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

fn stage1_grad_check() -> GradReport {
    let cfg = GeneratorConfig { frames: 3, refs: 4, d: 32, layers: 2, heads: 4, audio_width: 4, landmark_width: 8, ..Default::default() };
    let ps = ParamStore::new(3, DType::F64);
    let model = LandmarkGenerator::new(&cfg, &ps.pp("model")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = GeneratorInputs {
        audio: randn(&mut rng, &[2, cfg.frames, 16, 80], -4.0, 1.0),
        pose: randn(&mut rng, &[2, cfg.frames, 74, 2], 0.5, 0.2),
        refs: randn(&mut rng, &[2, cfg.refs, 131, 2], 0.5, 0.2),
    };
    let gt = LandmarkPrediction {
        lip: randn(&mut rng, &[2, cfg.frames, 41, 2], 0.5, 0.2),
        jaw: randn(&mut rng, &[2, cfg.frames, 16, 2], 0.5, 0.2),
    };
    let loss = || stage1_loss(&model.forward(&inputs).unwrap(), &gt, 1.0).unwrap();
    grad_check(&ps, &loss, STAGE1_GRAD_STEP, 5)
}

fn toy_render_batch(size: usize) -> (RenderBatch, Tensor) {
    let clip = synthetic_clip(12, size + 4, size, 2);
    let mut cfg = small_config(2);
    cfg.render = RenderConfig::tiny(size);
    cfg.stage2.batch_size = 2;
    let b = Stage2Trainer::new(cfg, vec![clip]).unwrap().sample_batch(0).unwrap();
    let batch = RenderBatch {
        masked_face: to_f64(&b.batch.masked_face),
        target_sketches: to_f64(&b.batch.target_sketches),
        ref_images: to_f64(&b.batch.ref_images),
        ref_sketches: to_f64(&b.batch.ref_sketches),
        audio: to_f64(&b.batch.audio),
    };
    (batch, to_f64(&b.target))
}

fn stage2_grad_checks() -> (GradReport, GradReport) {
    let size = 16;
    let (batch, target) = toy_render_batch(size);
    let ps = ParamStore::new(4, DType::F64);
    let renderer = Renderer::new(&RenderConfig::tiny(size), &ps.pp("model")).unwrap();
    let disc_ps = ParamStore::new(5, DType::F64);
    let disc = PatchDiscriminator::new(&DiscriminatorConfig { width: 4, scales: 2 }, &disc_ps.pp("disc")).unwrap();
    let weights = LossWeights::default();
    let gen_loss = || {
        let out = renderer.forward(&batch).unwrap();
        let terms = stage2_terms(&out.image, &out.agg_image, &target, &IdentityBackend, &disc, Reduction::Mean).unwrap();
        stage2_loss(&terms, &weights).unwrap()
    };
    let generator = grad_check(&ps, &gen_loss, STAGE2_GRAD_STEP, 6);
    let fake = renderer.forward(&batch).unwrap().image.detach();
    let disc_loss = || ls_discriminator_loss(&disc.forward(&target).unwrap(), &disc.forward(&fake).unwrap()).unwrap();
    let discriminator = grad_check(&disc_ps, &disc_loss, STAGE2_GRAD_STEP, 8);
    (generator, discriminator)
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let s1 = stage1_grad_check();
    let (g, d) = stage2_grad_checks();
    let secs = start.elapsed().as_secs_f64();
    let parts = [("stage1", &s1), ("stage2/renderer", &g), ("stage2/discriminator", &d)];
    let pass = parts.iter().all(|(_, r)| r.worst < GRAD_TOL) && secs < 300.0;
    let detail = parts
        .iter()
        .map(|(n, r)| format!("{n}: {} tensors, worst rel {:.1e} ({})", r.tensors, r.worst, r.worst_name))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, format!("{detail}; {secs:.0} s (tol {GRAD_TOL:.0e}, steps {STAGE1_GRAD_STEP:.0e}/{STAGE2_GRAD_STEP:.0e})"))
}

// ---------------------------------------------------------------- C3

fn c3_oracles() -> Outcome {
    let dev = Device::Cpu;
    let gt = LandmarkPrediction {
        lip: Tensor::full(0.5f64, (1, 1, 41, 2), &dev).unwrap(),
        jaw: Tensor::full(0.5f64, (1, 1, 16, 2), &dev).unwrap(),
    };
    let pred = LandmarkPrediction { lip: (&gt.lip + 0.1).unwrap(), jaw: gt.jaw.clone() };
    let l1 = scalar(&loss_l1(&pred, &gt).unwrap());

    let zero = Array3::<f32>::zeros((3, 8, 8));
    let half = Array3::<f32>::from_elem((3, 8, 8), 0.5);
    let p = psnr(&zero, &half).unwrap();

    let img0 = Tensor::zeros((1, 3, 4, 4), DType::F64, &dev).unwrap();
    let img1 = Tensor::ones((1, 3, 4, 4), DType::F64, &dev).unwrap();
    let w1 = Tensor::ones((1, 1, 4, 4), DType::F64, &dev).unwrap();
    let w3 = (&w1 * 3.0).unwrap();
    let agg = aggregate(&[img0, img1], &[w1, w3]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let agg_err = agg.iter().map(|v| (v - 0.75).abs()).fold(0.0, f64::max);

    let mel = compute_mel(&AudioClip::new(vec![0.0; 16000], 16000).unwrap(), &MelConfig::default()).unwrap();
    let steps = mel.num_steps();

    let ok = [(l1 - 8.2).abs() < 1e-9, (p - 6.0206).abs() < 1e-3, agg_err < 1e-6, steps == 81];
    outcome(
        ok.iter().all(|x| *x),
        format!("loss_l1 {l1:.6} (8.2), psnr {p:.4} dB (6.0206 +/- 1e-3), aggregate max err {agg_err:.1e} (0.75 +/- 1e-6), mel steps {steps} (81)"),
    )
}

// ---------------------------------------------------------------- C4

fn stage1_config(backbone: Backbone) -> RunConfig {
    let mut cfg = small_config(0);
    cfg.generator = GeneratorConfig { d: 64, layers: 2, heads: 4, refs: 5, audio_width: 8, landmark_width: 16, backbone, ..Default::default() };
    cfg.stage1.batch_size = 4;
    cfg.stage1.optimizer.lr = 1e-3;
    cfg
}

struct Stage1Run {
    best_px: f64,
    steps: u64,
    first_loss: f64,
    last_loss: f64,
    finite: bool,
    secs: f64,
}

fn train_stage1(backbone: Backbone, clip: &ClipData, save_to: Option<&Path>) -> Stage1Run {
    let start = Instant::now();
    let mut tr = Stage1Trainer::new(stage1_config(backbone), vec![clip.clone()]).unwrap();
    let mut run = Stage1Run { best_px: f64::INFINITY, steps: 0, first_loss: f64::NAN, last_loss: f64::NAN, finite: true, secs: 0.0 };
    let mut recent = vec![];
    for step in 1..=STAGE1_MAX_STEPS {
        match tr.train_step() {
            Ok(l) => {
                if step == 1 {
                    run.first_loss = l.loss;
                }
                recent.push(l.loss);
            }
            Err(_) => {
                run.finite = false;
                break;
            }
        }
        run.steps = step;
        if step % STAGE1_EVAL_EVERY == 0 {
            let px = tr.evaluate(0, STAGE1_CANVAS).unwrap();
            run.last_loss = recent.iter().sum::<f64>() / recent.len() as f64;
            recent.clear();
            run.best_px = run.best_px.min(px);
            if !px.is_finite() {
                run.finite = false;
                break;
            }
            if px < STAGE1_TARGET_PX {
                break;
            }
        }
    }
    if let Some(p) = save_to {
        tr.save(p).unwrap();
    }
    run.secs = start.elapsed().as_secs_f64();
    run
}

fn c4_stage1(shared: &mut Shared) -> Outcome {
    let clip = synthetic_clip(64, 96, 80, 0);
    let ckpt = shared.dir().join("landmark.safetensors");
    let tf = train_stage1(Backbone::Transformer, &clip, Some(&ckpt));
    let lstm = train_stage1(Backbone::Lstm, &clip, None);
    let tf_ok = tf.best_px < STAGE1_TARGET_PX;
    // divergence: a non-finite loss or a final loss above the first one
    let lstm_ok = lstm.finite && lstm.last_loss.is_finite() && lstm.last_loss < lstm.first_loss;
    let detail = format!(
        "transformer {:.3} px at step {} of {STAGE1_MAX_STEPS} ({:.0} s, target < {STAGE1_TARGET_PX} px at canvas {STAGE1_CANVAS}); lstm {} after {} steps, loss {:.4} -> {:.4}, best {:.3} px ({:.0} s)",
        tf.best_px, tf.steps, tf.secs,
        if lstm_ok { "stable" } else { "diverged" }, lstm.steps, lstm.first_loss, lstm.last_loss, lstm.best_px, lstm.secs,
    );
    shared.stage1 = Some((ckpt, detail.clone()));
    outcome(tf_ok && lstm_ok, detail)
}

fn ensure_stage1(shared: &mut Shared) -> PathBuf {
    if shared.stage1.is_none() {
        c4_stage1(shared);
    }
    shared.stage1.as_ref().unwrap().0.clone()
}

// ---------------------------------------------------------------- C5

fn stage2_config() -> RunConfig {
    let mut cfg = small_config(0);
    cfg.render = RenderConfig::tiny(STAGE2_SIZE);
    cfg.stage2.batch_size = 2;
    cfg.stage2.train_refs = 3;
    cfg.stage2.optimizer.lr = 5e-4;
    cfg.stage2.perceptual = PerceptualKind::RandomPyramid;
    cfg.stage2.discriminator = DiscriminatorConfig::default();
    cfg.stage2.weights = LossWeights::default();
    cfg
}

fn stage2_clip() -> (SyntheticClip, ClipData) {
    let s = SyntheticClip::generate(&SynthConfig { frames: STAGE2_FRAMES, frame_size: STAGE2_SIZE + 12, face_size: STAGE2_SIZE, seed: 0, ..Default::default() });
    let c = ClipData::from_parts("stage2", s.frames.clone(), s.face_box, s.landmarks.clone(), &s.audio, &MelConfig::default()).unwrap();
    (s, c)
}

/// Mean PSNR and SSIM of renders from ground-truth landmarks against the training crops.
fn render_quality(renderer: &Renderer, clip: &ClipData, num_refs: usize) -> (f64, f64) {
    let faces = render_faces(renderer, clip, &clip.landmarks.frames, &clip.mel, num_refs, 8).unwrap();
    let n = faces.len() as f64;
    let (mut p, mut s) = (0.0, 0.0);
    for (f, t) in faces.iter().zip(clip.frames.iter()) {
        let crop = face_crop(t, clip, renderer.config().image_size);
        p += psnr(f, &crop).unwrap();
        s += ssim(f, &crop).unwrap();
    }
    (p / n, s / n)
}

fn c5_stage2(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let (synth, clip) = stage2_clip();
    let clip_dir = shared.dir().join("clip");
    synth.write_to(&clip_dir).unwrap();
    let num_refs = ((STAGE2_FRAMES as f64) * 0.2).ceil() as usize;
    let mut tr = Stage2Trainer::new(stage2_config(), vec![clip.clone()]).unwrap();
    let (mut best, mut reached, mut steps) = ((0.0, 0.0), false, 0);
    for step in 1..=STAGE2_MAX_STEPS {
        if tr.train_step().is_err() {
            break;
        }
        steps = step;
        if step % STAGE2_EVAL_EVERY == 0 {
            let (p, s) = render_quality(tr.renderer(), &clip, num_refs);
            best = (p, s);
            if p > STAGE2_TARGET_PSNR && s > STAGE2_TARGET_SSIM {
                reached = true;
                break;
            }
        }
    }
    let checkpoint = shared.dir().join("render.safetensors");
    tr.save(&checkpoint).unwrap();
    let summary = format!(
        "PSNR {:.2} dB, SSIM {:.4} at step {steps} of {STAGE2_MAX_STEPS} ({:.0} s, targets > {STAGE2_TARGET_PSNR} dB and > {STAGE2_TARGET_SSIM})",
        best.0,
        best.1,
        start.elapsed().as_secs_f64()
    );
    shared.stage2 = Some(Stage2Run { trainer: tr, checkpoint, clip_dir, reached });
    outcome(reached, summary)
}

fn ensure_stage2(shared: &mut Shared) -> &Stage2Run {
    if shared.stage2.is_none() {
        c5_stage2(shared);
    }
    shared.stage2.as_ref().unwrap()
}

// ---------------------------------------------------------------- C6

fn run_infer(landmark: &Path, render: &Path, clip: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_lap"))
        .arg("infer")
        .arg("--clip")
        .arg(clip)
        .arg("--audio")
        .arg(clip.join("audio.wav"))
        .arg("--landmark-ckpt")
        .arg(landmark)
        .arg("--render-ckpt")
        .arg(render)
        .arg("--out")
        .arg(out)
        .arg("--raw")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    Ok(())
}

fn max_raw_diff(a: &Path, b: &Path) -> Result<(usize, f32), String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "raw"))
        .collect();
    files.sort();
    let mut worst = 0f32;
    for f in &files {
        let x = read_array_dump(f).map_err(|e| e.to_string())?;
        let y = read_array_dump(&b.join(f.file_name().unwrap())).map_err(|e| e.to_string())?;
        if x.shape() != y.shape() {
            return Err(format!("shape mismatch in {}", f.display()));
        }
        worst = x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).fold(worst, f32::max);
    }
    Ok((files.len(), worst))
}

fn c6_determinism(shared: &mut Shared) -> Outcome {
    let landmark = ensure_stage1(shared);
    let (render, clip_dir) = {
        let s2 = ensure_stage2(shared);
        (s2.checkpoint.clone(), s2.clip_dir.clone())
    };
    let (a, b) = (shared.dir().join("infer_a"), shared.dir().join("infer_b"));
    for out in [&a, &b] {
        if let Err(e) = run_infer(&landmark, &render, &clip_dir, out) {
            return outcome(false, format!("lap infer failed: {}", e.trim()));
        }
    }
    let frames = max_raw_diff(&a.join("frames"), &b.join("frames"));
    let faces = max_raw_diff(&a.join("faces"), &b.join("faces"));
    let same_json = std::fs::read(a.join("landmarks.jsonl")).ok() == std::fs::read(b.join("landmarks.jsonl")).ok();
    match (frames, faces) {
        (Ok((n, df)), Ok((m, dg))) => outcome(
            n > 0 && m > 0 && df <= 1e-5 && dg <= 1e-5 && same_json,
            format!("{n} frames max diff {df:.1e}, {m} faces max diff {dg:.1e} (limit 1e-5), landmark JSON {}", if same_json { "identical" } else { "differs" }),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

// ---------------------------------------------------------------- C7

fn c7_reference_count(shared: &mut Shared) -> Outcome {
    let (_, clip) = stage2_clip();
    let s2 = ensure_stage2(shared);
    let (p1, _) = render_quality(s2.trainer.renderer(), &clip, 1);
    let (p5, _) = render_quality(s2.trainer.renderer(), &clip, 5);
    let note = if s2.reached { "" } else { " (renderer did not reach the overfit target)" };
    outcome(p5 >= p1 - 0.2, format!("PSNR N=5 {p5:.3} dB vs N=1 {p1:.3} dB (need N=5 >= N=1 - 0.2){note}"))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let strict = std::env::var("LAP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<String>> = std::env::var("LAP_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    let mut shared = Shared::default();
    type Criterion = (&'static str, &'static str, fn(&mut Shared) -> Outcome);
    let criteria: [Criterion; 7] = [
        ("C1", "invariant suite", |_| c1_invariants()),
        ("C2", "gradient checks", |_| c2_gradients()),
        ("C3", "hand-arithmetic oracles", |_| c3_oracles()),
        ("C4", "stage-1 overfit", c4_stage1),
        ("C5", "stage-2 overfit", c5_stage2),
        ("C6", "end-to-end determinism", c6_determinism),
        ("C7", "reference-count non-degradation", c7_reference_count),
    ];
    // silence the panic messages of properties that are expected to be caught
    std::panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(|| run(&mut shared))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !result.pass {
            failures += 1;
        }
        println!("{} {id} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    if failures > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

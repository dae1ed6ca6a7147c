use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lap::audio::AudioClip;
use lap::pipeline::config::RunConfig;
use lap::pipeline::dataset::{ingest, validate_clip, ClipData};
use lap::pipeline::eval::{evaluate, Scorer};
use lap::pipeline::infer::{infer_clip, load_landmark_model, load_renderer, mux_video, write_outputs, InferReport};
use lap::pipeline::train::{run_stage1, run_stage2};
use lap::synth::{SynthConfig, SyntheticClip};
use lap::{Error, Result};

#[derive(Parser)]
#[command(name = "lap", version, about = "Audio-driven talking-face synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Landmark,
    Render,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a dataset root and print the ingest report.
    Prep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dub a clip with new audio.
    Infer {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        landmark_ckpt: PathBuf,
        #[arg(long)]
        render_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference count; defaults to the configured fraction of the clip length.
        #[arg(long)]
        refs: Option<usize>,
        /// Also write exact float dumps next to the PNGs.
        #[arg(long)]
        raw: bool,
        /// Mux the frames and audio into this video file with ffmpeg.
        #[arg(long)]
        video: Option<PathBuf>,
    },
    /// Compare predicted frames to ground truth and print JSON metrics.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 25)]
        fps: u32,
        /// External metric, NAME=COMMAND; called as `COMMAND <pred> <gt>`.
        #[arg(long)]
        scorer: Vec<Scorer>,
    },
    /// Write a procedural clip in dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default configuration as TOML.
    Config,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Prep { data, config } => {
            let cfg = load_config(config.as_deref())?;
            print_json(&ingest(&data, cfg.data.fps)?)
        }
        Cmd::Train { stage, data, out, config, resume, seed } => {
            let mut cfg = match &resume {
                Some(p) => lap::pipeline::checkpoint::load(p)?.config,
                None => load_config(config.as_deref())?,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = ingest(&data, cfg.data.fps)?;
            let clips = report
                .records
                .iter()
                .map(|r| ClipData::load(r, cfg.data.fps, &cfg.mel))
                .collect::<Result<Vec<_>>>()?;
            let summary = match stage {
                Stage::Landmark => run_stage1(cfg, clips, &out, resume.as_deref())?,
                Stage::Render => run_stage2(cfg, clips, &out, resume.as_deref())?,
            };
            print_json(&summary)
        }
        Cmd::Infer { clip, audio, landmark_ckpt, render_ckpt, out, refs, raw, video } => {
            let stage1 = load_landmark_model(&landmark_ckpt)?;
            let stage2 = load_renderer(&render_ckpt)?;
            let cfg = &stage2.config;
            let record = validate_clip(&clip, cfg.data.fps)
                .map_err(|reason| Error::Dataset(format!("{}: {reason}", clip.display())))?;
            let data = ClipData::load(&record, cfg.data.fps, &cfg.mel)?;
            let driving = AudioClip::read_wav(&audio)?;
            let result = infer_clip(&stage1, &stage2, &data, &driving, refs)?;
            write_outputs(&result, &out, data.fps, raw)?;
            if let Some(v) = &video {
                mux_video(&out.join("frames"), &audio, data.fps, v)?;
            }
            print_json(&InferReport { frames: result.frames.len(), num_refs: result.num_refs, out_dir: out, video })
        }
        Cmd::Eval { pred, gt, fps, scorer } => print_json(&evaluate(&pred, &gt, fps, &scorer)?),
        Cmd::Synth { out, frames, size, seed } => {
            let face_size = size * 5 / 6;
            SyntheticClip::generate(&SynthConfig { frames, frame_size: size, face_size, seed, ..Default::default() })
                .write_to(&out)
        }
        Cmd::Config => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

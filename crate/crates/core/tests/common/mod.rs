#![allow(dead_code)]

use lap::audio::MelConfig;
use lap::generator::GeneratorConfig;
use lap::losses::DiscriminatorConfig;
use lap::pipeline::config::{PerceptualKind, RunConfig};
use lap::pipeline::dataset::ClipData;
use lap::render::RenderConfig;
use lap::synth::{SynthConfig, SyntheticClip};

pub fn synthetic_clip(frames: usize, frame_size: usize, face_size: usize, seed: u64) -> ClipData {
    let s = SyntheticClip::generate(&SynthConfig { frames, frame_size, face_size, seed, ..Default::default() });
    ClipData::from_parts(&format!("synth{seed}"), s.frames, s.face_box, s.landmarks, &s.audio, &MelConfig::default())
        .unwrap()
}

/// Narrow models for fast tests.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        generator: GeneratorConfig {
            d: 32,
            layers: 2,
            heads: 4,
            refs: 5,
            audio_width: 8,
            landmark_width: 16,
            ..Default::default()
        },
        render: RenderConfig::tiny(32),
        ..Default::default()
    };
    cfg.stage1.batch_size = 2;
    cfg.stage2.batch_size = 1;
    cfg.stage2.train_refs = 2;
    cfg.stage2.perceptual = PerceptualKind::Identity;
    cfg.stage2.discriminator = DiscriminatorConfig { width: 4, scales: 2 };
    cfg
}

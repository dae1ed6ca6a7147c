//! Stage 1: lip and jaw landmarks from audio, pose landmarks and reference landmarks.

mod loss;
mod lstm;
mod transformer;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use loss::{landmark_error, landmark_error_tensors, loss_continuity, loss_l1, stage1_loss};
pub use lstm::LstmGenerator;
pub use transformer::{Block, Transformer};

use crate::encoders::{AudioEncoder, LandmarkEncoder};
use crate::error::{shape_err, Error, Result};
use crate::landmarks::{JAW_POINTS, LIP_POINTS, NUM_POINTS, POSE_POINTS};
use crate::nn::{Init, Mlp, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Transformer,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Frames predicted per window.
    pub frames: usize,
    /// Reference landmark sets per window.
    pub refs: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub audio_width: usize,
    pub landmark_width: usize,
    pub backbone: Backbone,
    /// Zero the final projection of every residual branch.
    pub zero_init_residual: bool,
    /// Zero the output layer of both prediction heads.
    pub zero_init_heads: bool,
    /// Zero the final projection of the three encoders.
    pub zero_init_encoders: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            refs: 15,
            d: 512,
            layers: 4,
            heads: 8,
            mlp_ratio: 4.0,
            audio_width: 32,
            landmark_width: 64,
            backbone: Backbone::Transformer,
            zero_init_residual: false,
            zero_init_heads: false,
            zero_init_encoders: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 {
            return bad(format!("generator.frames must be >= 2, got {}", self.frames));
        }
        if self.refs == 0 || self.d == 0 || self.heads == 0 || self.audio_width == 0 || self.landmark_width == 0 {
            return bad("generator sizes must be positive".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("generator.d ({}) must be divisible by heads ({})", self.d, self.heads));
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("generator.mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.refs + 2 * self.frames
    }
}

/// Batched stage-1 inputs.
#[derive(Debug, Clone)]
pub struct GeneratorInputs {
    /// `(B, T, 16, 80)`
    pub audio: Tensor,
    /// `(B, T, 74, 2)`
    pub pose: Tensor,
    /// `(B, N_l, 131, 2)`
    pub refs: Tensor,
}

#[derive(Debug, Clone)]
pub struct LandmarkPrediction {
    /// `(B, T, 41, 2)`
    pub lip: Tensor,
    /// `(B, T, 16, 2)`
    pub jaw: Tensor,
}

/// Learned type vectors plus the sinusoidal frame-position table.
#[derive(Debug, Clone)]
pub struct ModalityEncodings {
    pub audio: Tensor,
    pub pose: Tensor,
    pub reference: Tensor,
    pub positions: Tensor,
}

/// `pe[t, 2i] = sin(t / 10000^(2i/d))`, `pe[t, 2i+1] = cos(...)`.
pub fn sinusoidal_table(max_t: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f64; max_t * d];
    for t in 0..max_t {
        for j in 0..d {
            let i2 = (j / 2 * 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d as f64);
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(data, (max_t, d), &Device::Cpu)?.to_dtype(dtype)?)
}

impl ModalityEncodings {
    pub fn new(cfg: &GeneratorConfig, ps: &ParamStore) -> Result<Self> {
        let init = if cfg.zero_init_encoders { Init::Zeros } else { Init::Normal(0.02) };
        Ok(Self {
            audio: ps.get("type_audio", cfg.d, init)?,
            pose: ps.get("type_pose", cfg.d, init)?,
            reference: ps.get("type_reference", cfg.d, init)?,
            positions: sinusoidal_table(cfg.frames, cfg.d, ps.dtype())?,
        })
    }
}

/// Builds `[refs | audio | pose]` tokens, shape `(B, N_l + 2T, d)`.
///
/// References receive only their type vector; audio and pose tokens at frame
/// `t` receive the position row `t` plus their type vector.
pub fn assemble_tokens(refs: &Tensor, audio: &Tensor, pose: &Tensor, enc: &ModalityEncodings) -> Result<Tensor> {
    let (b, _, d) = refs.dims3()?;
    let (ba, t, da) = audio.dims3()?;
    let (bp, tp, dp) = pose.dims3()?;
    if ba != b || bp != b || da != d || dp != d {
        return Err(shape_err!("token blocks disagree on batch or width"));
    }
    if tp != t {
        return Err(shape_err!("audio has {t} frames, pose has {tp}"));
    }
    let max_t = enc.positions.dim(0)?;
    if t > max_t {
        return Err(shape_err!("{t} frames exceed the positional table ({max_t})"));
    }
    let pos = enc.positions.narrow(0, 0, t)?.unsqueeze(0)?;
    let refs = refs.broadcast_add(&enc.reference)?;
    let audio = audio.broadcast_add(&pos)?.broadcast_add(&enc.audio)?;
    let pose = pose.broadcast_add(&pos)?.broadcast_add(&enc.pose)?;
    Ok(Tensor::cat(&[&refs, &audio, &pose], 1)?)
}

/// Shared per-frame prediction heads.
#[derive(Debug, Clone)]
pub struct Heads {
    lip: Mlp,
    jaw: Mlp,
}

impl Heads {
    pub fn new(d: usize, zero_output: bool, ps: &ParamStore) -> Result<Self> {
        let make = |out: usize, name: &str| {
            if zero_output {
                Mlp::with_zero_output(d, d, out, &ps.pp(name))
            } else {
                Mlp::new(d, d, out, &ps.pp(name))
            }
        };
        Ok(Self {
            lip: make(LIP_POINTS * 2, "lip")?,
            jaw: make(JAW_POINTS * 2, "jaw")?,
        })
    }

    /// `lip_tokens`, `jaw_tokens`: `(B, T, d)`.
    pub fn forward(&self, lip_tokens: &Tensor, jaw_tokens: &Tensor) -> Result<LandmarkPrediction> {
        let (b, t, _) = lip_tokens.dims3()?;
        Ok(LandmarkPrediction {
            lip: self.lip.forward(lip_tokens)?.reshape((b, t, LIP_POINTS, 2))?,
            jaw: self.jaw.forward(jaw_tokens)?.reshape((b, t, JAW_POINTS, 2))?,
        })
    }
}

/// The three input encoders shared by both backbones.
#[derive(Debug, Clone)]
pub struct InputEncoders {
    pub audio: AudioEncoder,
    pub pose: LandmarkEncoder,
    pub reference: LandmarkEncoder,
}

impl InputEncoders {
    pub fn new(cfg: &GeneratorConfig, ps: &ParamStore) -> Result<Self> {
        let z = cfg.zero_init_encoders;
        Ok(Self {
            audio: AudioEncoder::new(cfg.audio_width, cfg.d, z, &ps.pp("audio_encoder"))?,
            pose: LandmarkEncoder::new(POSE_POINTS, cfg.landmark_width, cfg.d, z, &ps.pp("pose_encoder"))?,
            reference: LandmarkEncoder::new(NUM_POINTS, cfg.landmark_width, cfg.d, z, &ps.pp("reference_encoder"))?,
        })
    }

    /// Returns `(refs (B,N,d), audio (B,T,d), pose (B,T,d))`.
    pub fn encode(&self, inputs: &GeneratorInputs, cfg: &GeneratorConfig) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, t, h, w) = inputs.audio.dims4()?;
        let (bp, tp, np, _) = inputs.pose.dims4()?;
        let (br, nr, nrp, _) = inputs.refs.dims4()?;
        if bp != b || br != b {
            return Err(shape_err!("inputs disagree on batch size"));
        }
        if t != cfg.frames || tp != cfg.frames {
            return Err(shape_err!("expected {} frames of audio and pose, got {t} and {tp}", cfg.frames));
        }
        if nr != cfg.refs {
            return Err(shape_err!("expected {} reference sets, got {nr}", cfg.refs));
        }
        let d = cfg.d;
        let audio = self.audio.forward(&inputs.audio.reshape((b * t, h, w))?)?.reshape((b, t, d))?;
        let pose = self.pose.forward(&inputs.pose.reshape((b * t, np, 2))?)?.reshape((b, t, d))?;
        let refs = self.reference.forward(&inputs.refs.reshape((b * nr, nrp, 2))?)?.reshape((b, nr, d))?;
        Ok((refs, audio, pose))
    }
}

/// Transformer landmark generator.
#[derive(Debug, Clone)]
pub struct LandmarkGenerator {
    cfg: GeneratorConfig,
    pub encoders: InputEncoders,
    pub encodings: ModalityEncodings,
    pub transformer: Transformer,
    pub heads: Heads,
}

impl LandmarkGenerator {
    pub fn new(cfg: &GeneratorConfig, ps: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoders: InputEncoders::new(cfg, ps)?,
            encodings: ModalityEncodings::new(cfg, &ps.pp("encodings"))?,
            transformer: Transformer::new(cfg, &ps.pp("transformer"))?,
            heads: Heads::new(cfg.d, cfg.zero_init_heads, &ps.pp("heads"))?,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn tokens(&self, inputs: &GeneratorInputs) -> Result<Tensor> {
        let (refs, audio, pose) = self.encoders.encode(inputs, &self.cfg)?;
        assemble_tokens(&refs, &audio, &pose, &self.encodings)
    }

    /// Lip head on tokens `N_l..N_l+T`, jaw head on tokens `N_l+T..N_l+2T`.
    pub fn predict_landmarks(&self, tokens: &Tensor) -> Result<LandmarkPrediction> {
        let (n, t) = (self.cfg.refs, self.cfg.frames);
        if tokens.dim(1)? != n + 2 * t {
            return Err(shape_err!("expected {} tokens, got {}", n + 2 * t, tokens.dim(1)?));
        }
        self.heads.forward(&tokens.narrow(1, n, t)?, &tokens.narrow(1, n + t, t)?)
    }

    pub fn forward(&self, inputs: &GeneratorInputs) -> Result<LandmarkPrediction> {
        let z = self.transformer.forward(&self.tokens(inputs)?)?;
        self.predict_landmarks(&z)
    }
}

/// Either stage-1 backbone behind one interface.
#[derive(Debug, Clone)]
pub enum Stage1Model {
    Transformer(LandmarkGenerator),
    Lstm(LstmGenerator),
}

impl Stage1Model {
    pub fn new(cfg: &GeneratorConfig, ps: &ParamStore) -> Result<Self> {
        Ok(match cfg.backbone {
            Backbone::Transformer => Self::Transformer(LandmarkGenerator::new(cfg, ps)?),
            Backbone::Lstm => Self::Lstm(LstmGenerator::new(cfg, ps)?),
        })
    }

    pub fn forward(&self, inputs: &GeneratorInputs) -> Result<LandmarkPrediction> {
        match self {
            Self::Transformer(m) => m.forward(inputs),
            Self::Lstm(m) => m.forward(inputs),
        }
    }
}

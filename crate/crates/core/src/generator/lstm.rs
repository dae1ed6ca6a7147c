use candle_core::Tensor;

use super::{GeneratorConfig, GeneratorInputs, Heads, InputEncoders, LandmarkPrediction};
use crate::error::Result;
use crate::nn::{ops, Linear, ParamStore};

/// One direction of an LSTM over `(B, T, in)` inputs.
#[derive(Debug, Clone)]
struct LstmCell {
    input: Linear,
    hidden: Linear,
    size: usize,
}

impl LstmCell {
    fn new(input: usize, size: usize, ps: &ParamStore) -> Result<Self> {
        Ok(Self {
            input: Linear::new(input, 4 * size, &ps.pp("input"))?,
            hidden: Linear::new(size, 4 * size, &ps.pp("hidden"))?,
            size,
        })
    }

    fn run(&self, xs: &Tensor, reverse: bool) -> Result<Tensor> {
        let (b, t, _) = xs.dims3()?;
        let gates_x = self.input.forward(xs)?;
        let mut h = Tensor::zeros((b, self.size), xs.dtype(), xs.device())?;
        let mut c = h.clone();
        let mut outs = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let g = (gates_x.narrow(1, step, 1)?.squeeze(1)? + self.hidden.forward(&h)?)?;
            let chunk = |k: usize| g.narrow(1, k * self.size, self.size);
            let i = ops::sigmoid(&chunk(0)?)?;
            let f = ops::sigmoid(&chunk(1)?)?;
            let cand = chunk(2)?.tanh()?;
            let o = ops::sigmoid(&chunk(3)?)?;
            c = ((f * &c)? + (i * cand)?)?;
            h = (o * c.tanh()?)?;
            outs[step] = Some(h.clone());
        }
        let outs: Vec<Tensor> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        Ok(Tensor::stack(&outs, 1)?)
    }
}

/// Recurrent baseline: mean reference embedding, per-frame pose and audio,
/// a bidirectional LSTM, then the same heads as the transformer.
#[derive(Debug, Clone)]
pub struct LstmGenerator {
    cfg: GeneratorConfig,
    pub encoders: InputEncoders,
    forward_cell: LstmCell,
    backward_cell: LstmCell,
    lip_proj: Linear,
    jaw_proj: Linear,
    pub heads: Heads,
}

impl LstmGenerator {
    pub fn new(cfg: &GeneratorConfig, ps: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let hidden = (d / 2).max(1);
        Ok(Self {
            cfg: cfg.clone(),
            encoders: InputEncoders::new(cfg, ps)?,
            forward_cell: LstmCell::new(3 * d, hidden, &ps.pp("lstm.fwd"))?,
            backward_cell: LstmCell::new(3 * d, hidden, &ps.pp("lstm.bwd"))?,
            lip_proj: Linear::new(2 * hidden, d, &ps.pp("lstm.lip_proj"))?,
            jaw_proj: Linear::new(2 * hidden, d, &ps.pp("lstm.jaw_proj"))?,
            heads: Heads::new(d, cfg.zero_init_heads, &ps.pp("heads"))?,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn forward(&self, inputs: &GeneratorInputs) -> Result<LandmarkPrediction> {
        let (refs, audio, pose) = self.encoders.encode(inputs, &self.cfg)?;
        let (b, t, d) = audio.dims3()?;
        let ref_mean = refs.mean_keepdim(1)?.broadcast_as((b, t, d))?;
        let xs = Tensor::cat(&[&ref_mean, &pose, &audio], 2)?.contiguous()?;
        let hs = Tensor::cat(&[self.forward_cell.run(&xs, false)?, self.backward_cell.run(&xs, true)?], 2)?;
        self.heads.forward(&self.lip_proj.forward(&hs)?, &self.jaw_proj.forward(&hs)?)
    }
}

use candle_core::Tensor;

use super::GeneratorConfig;
use crate::error::Result;
use crate::nn::{ops, LayerNorm, Linear, Mlp, ParamStore};

/// Pre-norm block: `z + MSA(LN(z))`, then `z + MLP(LN(z))`.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl Block {
    pub fn new(cfg: &GeneratorConfig, ps: &ParamStore) -> Result<Self> {
        let d = cfg.d;
        let hidden = ((d as f64) * cfg.mlp_ratio).round().max(1.0) as usize;
        let (proj, mlp) = if cfg.zero_init_residual {
            (
                Linear::zeroed(d, d, &ps.pp("attn_proj"))?,
                Mlp::with_zero_output(d, hidden, d, &ps.pp("mlp"))?,
            )
        } else {
            (Linear::new(d, d, &ps.pp("attn_proj"))?, Mlp::new(d, hidden, d, &ps.pp("mlp"))?)
        };
        Ok(Self {
            ln1: LayerNorm::new(d, &ps.pp("ln1"))?,
            qkv: Linear::new(d, 3 * d, &ps.pp("qkv"))?,
            proj,
            ln2: LayerNorm::new(d, &ps.pp("ln2"))?,
            mlp,
            heads: cfg.heads,
        })
    }

    /// Returns the block output and the attention map `(B, heads, N, N)`.
    pub fn forward_with_attention(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = z.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(&self.ln1.forward(z)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * d, d)?
                .reshape((b, n, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = ops::softmax_last_dim(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        let z = (z + self.proj.forward(&ctx)?)?;
        let z = (&z + self.mlp.forward(&self.ln2.forward(&z)?)?)?;
        Ok((z, attn))
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(z)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn new(cfg: &GeneratorConfig, ps: &ParamStore) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(cfg, &ps.pp(format!("block{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut z = tokens.clone();
        for block in &self.blocks {
            z = block.forward(&z)?;
        }
        Ok(z)
    }

    pub fn forward_with_attention(&self, tokens: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut z = tokens.clone();
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, attn) = block.forward_with_attention(&z)?;
            z = next;
            maps.push(attn);
        }
        Ok((z, maps))
    }
}

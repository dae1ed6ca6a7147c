use candle_core::{Tensor, D};

use super::ops;
use super::params::{Init, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, ps: &ParamStore) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(in_dim, out_dim, Init::Uniform(bound), Some(Init::Uniform(bound)), ps)
    }

    /// Linear layer whose weights and bias start at zero.
    pub fn zeroed(in_dim: usize, out_dim: usize, ps: &ParamStore) -> Result<Self> {
        Self::with_init(in_dim, out_dim, Init::Zeros, Some(Init::Zeros), ps)
    }

    pub fn with_init(in_dim: usize, out_dim: usize, w: Init, b: Option<Init>, ps: &ParamStore) -> Result<Self> {
        let weight = ps.get("weight", (out_dim, in_dim), w)?;
        let bias = b.map(|b| ps.get("bias", out_dim, b)).transpose()?;
        Ok(Self { weight, bias })
    }

    /// Applies to the last axis of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Conv2d {
    /// Square-kernel conv with "same"-style padding `k / 2`.
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, ps: &ParamStore) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self::with_geometry(cin, cout, (k, k), (stride, stride), (k / 2, k / 2), Init::Uniform(bound), ps)
    }

    pub fn with_geometry(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        init: Init,
        ps: &ParamStore,
    ) -> Result<Self> {
        let weight = ps.get("weight", (cout, cin, kernel.0, kernel.1), init)?;
        let bias_init = match init {
            Init::Uniform(b) => Init::Uniform(b),
            _ => Init::Zeros,
        };
        let bias = Some(ps.get("bias", cout, bias_init)?);
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d_bias(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

/// 1-D conv over `(B, C, N)` implemented as a `1 x k` 2-D conv.
#[derive(Debug, Clone)]
pub struct Conv1d {
    inner: Conv2d,
}

impl Conv1d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, ps: &ParamStore) -> Result<Self> {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        Ok(Self {
            inner: Conv2d::with_geometry(cin, cout, (1, k), (1, stride), (0, k / 2), Init::Uniform(bound), ps)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, n) = x.dims3()?;
        let y = self.inner.forward(&x.reshape((b, c, 1, n))?)?;
        Ok(y.squeeze(2)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, ps: &ParamStore) -> Result<Self> {
        Ok(Self {
            gamma: ps.get("gamma", dim, Init::Ones)?,
            beta: ps.get("beta", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, ps: &ParamStore) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(in_dim, hidden, &ps.pp("fc1"))?,
            fc2: Linear::new(hidden, out_dim, &ps.pp("fc2"))?,
        })
    }

    pub fn with_zero_output(in_dim: usize, hidden: usize, out_dim: usize, ps: &ParamStore) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(in_dim, hidden, &ps.pp("fc1"))?,
            fc2: Linear::zeroed(hidden, out_dim, &ps.pp("fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    ops::leaky_relu(x, 0.2)
}

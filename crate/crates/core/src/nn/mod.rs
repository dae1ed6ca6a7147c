//! Small neural-network toolkit on top of candle tensors.

pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use layers::{Conv1d, Conv2d, LayerNorm, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamStore};

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod infer;
pub mod samples;
pub mod train;

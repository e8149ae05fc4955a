//! Dense tensors with tape-based reverse-mode differentiation, and the
//! recurrent navigation policy built on them.
//!
//! Everything is generic over [`Scalar`] so the same network runs in `f32`
//! for training and in `f64` when gradients are checked against finite
//! differences.

mod params;
mod policy;
mod tape;
mod tensor;

use thiserror::Error;

pub use params::{load_params, read_params, save_params, write_params, Param, ParamGroup, ParamSet};
pub use policy::{
    argmax_rows, encode_compass, log_softmax_rows, Policy, PolicyConfig, PolicyOutput, Recorded, RecurrentState,
    SequenceInput, COMPASS_WIDTH,
};
pub use tape::{depth_to_space, space_to_depth, ConvGeom, Tape, Var};
pub use tensor::{gemm, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

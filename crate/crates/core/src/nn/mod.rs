//! Named parameter storage and the network blocks built on it.

mod blocks;
mod params;

pub use blocks::{
    adain, conv2d, cross_attention, embed, gru_cell, layer_norm, linear, mln, mln_features, mlp, modulate, pixel_shuffle, silu,
    upsample2, MotionContext, LN_EPS,
};
pub use params::{full_name, Grads, Init, ParamEntry, ParamGroup, ParamStore, Tape};

use crate::grad::{GradError, Shape};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("parameter group `{0}` already exists")]
    DuplicateGroup(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Dim { what: String, expected: Shape, got: Shape },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("attention over an empty memory bank")]
    EmptyBank,
    #[error("token {key} out of range for vocabulary of {size}")]
    TokenOutOfRange { key: usize, size: usize },
}

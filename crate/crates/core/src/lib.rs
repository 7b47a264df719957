//! Cross-domain few-shot learning at desk scale: a compact convolutional
//! transformer with bidirectional cross-attention blocks, self-distillation
//! pretraining over two domains at once, transductive label-propagation
//! smoothing, and an episodic N-way K-shot evaluation harness — all on a
//! small reverse-mode tensor engine built for verifiability.

pub mod error;
pub mod real;
pub mod tensor;
pub mod tape;
pub mod optim;
pub mod schedule;
pub mod model;
pub mod data;
pub mod dino;
pub mod labelprop;
pub mod fewshot;
pub mod config;
pub mod checkpoint;
pub mod selftest;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Bound, FlopCounts, GeluMode, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

//! Split-window transformer for multi-modal behavior sequences.
//!
//! Behaviors (text + optional image embeddings) are tokenized by a
//! dual-channel variational autoencoder, then mined by two hierarchical
//! stages of split-window / inter-window attention, and finally classified
//! from a prepended CLS token. All numerics are generic over [`Scalar`]
//! (`f32` for training and benchmarks, `f64` for gradient checks).

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mvae;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Mode, ScoreLedger, Tape, Var, WindowLayout};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;

//! Training framework for multi-label image classification under label
//! uncertainty. A compact densely connected network with one deformable
//! convolution block feeds two output heads: one produces per-class logits
//! trained with masked binary cross-entropy, the other produces Dirichlet
//! evidence used both as a regularizer and as an abstention signal at
//! inference. Everything from the tensor engine up is implemented here.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, tape::Tape, tape::Var};

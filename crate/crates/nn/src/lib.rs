//! Small reverse-mode autodiff engine for 2-D/3-D convolutional networks.
//!
//! Tensors are dense `f32`, laid out `[N, C, D, H, W]` for volumes. Everything
//! runs single-threaded so training is bit-reproducible for a fixed seed.

mod conv;
mod graph;
mod params;
mod tensor;

pub use conv::ConvCfg;
pub use graph::{Gradients, Graph, Var};
pub use params::{seeded_rng, Adam, Init, ParamStore};
pub use rand_chacha::ChaCha8Rng;
pub use tensor::Tensor;

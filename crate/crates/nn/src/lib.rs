//! Dense `f32`/`f64` tensors, a reverse-mode autodiff tape, the layers the
//! denoisers and encoders are assembled from, and AdamW.

pub mod error;
pub mod layers;
pub mod network;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use layers::{
    sinusoidal_batch, sinusoidal_embedding, BiGru, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
pub use network::{gradient_check, max_relative_error, ForwardPass, LayerSpec, Network, NetworkSpec};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::Real;
pub use rng::{derive_seed, rng_from};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

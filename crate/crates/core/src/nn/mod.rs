//! Differentiable building blocks: a reverse-mode tape, affine/MLP layers,
//! linear attention, mixture of experts and the timestep embedding.

mod fourier;
pub mod gradcheck;
mod graph;
mod layers;
mod params;
mod real;

pub use fourier::{fourier_embed, fourier_embed_rows, FourierEmbedConfig};
pub use graph::{Graph, Segments, Var};
pub use layers::{Attention, LayerNorm, Linear, MoE, Mlp};
pub use params::{Gradients, ParamId, ParamStore, ParamTensor};
pub use real::Real;

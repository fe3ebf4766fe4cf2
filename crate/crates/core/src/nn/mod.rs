//! Minimal differentiable building blocks: dense matrices, a reverse-mode
//! tape, standard layers and an adaptive-moment optimizer.

mod adam;
mod graph;
mod layers;
mod matrix;
mod params;

pub use adam::{clip_grad_norm, Adam};
pub use graph::{Gradients, Graph, Var};
pub use layers::{GruCell, Linear, Mlp2};
pub use matrix::Matrix;
pub use params::ParamStore;

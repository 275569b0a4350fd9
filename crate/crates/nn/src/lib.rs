//! Minimal CPU tensor engine with reverse-mode differentiation.
//!
//! Provides exactly the operators the reconstruction GAN and the Siamese
//! patch scorer need: (transposed) convolutions, reflection padding,
//! instance/batch normalization, spectral normalization, pooling, dense
//! layers, and an Adam optimizer. Every op is generic over [`Float`] so the
//! same networks can be instantiated in `f64` for gradient checks.

mod conv;
mod float;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub use conv::ConvGeom;
pub use float::{gemm, Float, MatRef};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid parameter data: {0}")]
    Format(String),
}

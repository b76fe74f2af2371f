//! Numeric substrate: tensors, reverse-mode differentiation, Adam and
//! Gaussian mixtures.

pub mod adam;
pub mod gmm;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use gmm::{fit_gmm, GmmModel};
pub use graph::{Gradients, Graph, ParamId, Var};
pub use params::{ParamEntry, ParamStore};
pub use tensor::{cast, Real, Tensor};

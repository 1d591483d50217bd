//! Small tape-based reverse-mode autodiff over dense tensors.

pub mod archive;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use archive::{Archive, ArchiveError};
pub use graph::{BinaryKind, Grads, Graph, UnaryKind, Var};
pub use kernels::Mask;
pub use params::{component_of, ParamEntry, ParamStore, ParameterStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

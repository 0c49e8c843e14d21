//! Self-contained f64 neural-network substrate: tensors, kernels, a
//! reverse-mode tape, parameter storage and finite-difference checking.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Grads, Graph, NodeId};
pub use kernels::ConvSpec;
pub use layers::{Conv, ConvNormRelu, Ctx, Norm};
pub use params::{NormalSampler, ParamGroup, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

//! Minimal CPU tensor engine with explicit backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, so a
//! layer instance must see `forward` and then `backward` for the same batch.

mod conv;
mod layers;
mod param;
mod scalar;
mod tensor;

pub use conv::Conv2d;
pub use layers::{
    sigmoid, softmax_channels, softmax_channels_backward, upsample2, upsample2_backward,
    BatchNorm2d, MaxPool2, Mode, Relu,
};
pub use param::{Module, Param, ParamFn, Visitor};
pub use scalar::Scalar;
pub(crate) use param::join;
pub use tensor::Tensor;

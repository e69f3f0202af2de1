//! A small dense training engine for the supported layer set, with per-group
//! channel masks and the mask gradients the pruner needs.

mod export;
pub mod gradcheck;
mod loss;
mod network;
pub(crate) mod ops;
mod optim;
mod salience;
mod scalar;
mod tensor;

pub use export::{affine_quantize, affine_quantize_weights, materialize_pruned, QuantizedTensor};
pub use loss::{argmax_rows, cross_entropy};
pub use network::{
    group_width, BnMode, BnStats, ForwardPass, Gradients, LayerParams, Masks, Model, Params,
};
pub use optim::{sgd_step, Sgd};
pub use salience::{group_salience, salience};
pub use scalar::Scalar;
pub use tensor::Tensor;

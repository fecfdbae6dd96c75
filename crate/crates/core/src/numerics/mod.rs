//! Minimal differentiable numerical primitives.
//!
//! Every operation is a pure function of its inputs. Backward passes are
//! written by hand per op and verified against central differences with
//! [`gradcheck::check_gradients`].

pub mod activation;
pub mod conv;
pub mod gradcheck;
pub mod gru;
pub mod params;
pub mod sample;
pub mod tensor;

pub use activation::{sigmoid, silu, softplus};
pub use conv::{conv2d, conv2d_backward, Conv2dGrads};
pub use gradcheck::{check_gradients, DifferentiableOp, FnOp, GradCheckReport};
pub use gru::{gru_cell, gru_cell_backward, gru_cell_cached, GruCache, GruGrads, GruParams};
pub use params::{ConvLayer, Grads, Init, ParamId, ParamStore};
pub use sample::{
    avgpool2x, avgpool2x_backward, bilinear_sample, bilinear_sample_backward, upsample2x,
    upsample2x_backward, UpsampleMode,
};
pub use tensor::{Real, Tensor};

/// Alias for rank-3 `[height, width, channels]` activations.
pub type FeatureMap<T> = Tensor<T>;

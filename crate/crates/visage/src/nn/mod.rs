//! Hand-rolled neural-network layers on ndarray.
//!
//! Everything here is written for exact reproducibility: single-threaded
//! deterministic kernels, explicit forward caches, and backward passes that
//! accumulate into caller-owned gradient buffers. Layers are generic over
//! [`crate::real::Real`] so gradient checks run in `f64` while training runs
//! in `f32`.
//!
//! Forward passes return `(output, cache)` instead of storing state, because
//! one training iteration pushes several different batches through the same
//! network (e.g. the decoder renders the relabeled, reconstructed, and
//! prior-sampled images); each call keeps its own cache for the later
//! backward pass. Passing `None` for the gradient accumulator computes only
//! the input gradient, which is how losses reach upstream networks through a
//! frozen one.

pub mod act;
pub mod conv;
pub mod deconv;
pub mod dropout;
pub mod gradcheck;
pub mod im2col;
pub mod init;
pub mod linear;
pub mod norm;

pub use act::{lrelu, piecewise_backward, relu, sigmoid, sigmoid_backward, tanh, tanh_backward};
pub use conv::{Conv2d, Conv2dCache, Conv2dGrads};
pub use deconv::{Deconv2d, Deconv2dCache, Deconv2dGrads};
pub use dropout::dropout;
pub use im2col::{col2im_add, conv_out_hw, deconv_out_hw, im2col};
pub use init::{fill_normal, he_std, standard_normal, GAN_WEIGHT_STD};
pub use linear::{Linear, LinearCache, LinearGrads};
pub use norm::{InstanceNorm, InstanceNormCache, InstanceNormGrads};

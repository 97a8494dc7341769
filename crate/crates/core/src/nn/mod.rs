//! Small differentiable toolkit: MLPs with hand-derived backprop, Adam,
//! clipping, soft updates and the loss primitives the trainers share.

pub mod checkpoint;
pub mod gradcheck;
mod loss;
mod mlp;
mod optim;
mod params;

pub use gradcheck::{check_gradient, finite_difference, finite_difference_4th, max_relative_error, GradCheck, Objective};
pub use loss::{
    clamp_log_std, gaussian_nll, gaussian_nll_1d, gaussian_nll_1d_grad, huber, huber_grad, LOG_STD_MAX, LOG_STD_MIN,
};
pub use mlp::{
    mlp_forward, sigmoid, softplus, Activation, ForwardCache, Mlp, MlpSpec, OutputTransform, LEAKY_SLOPE,
    SOFTPLUS_EPS,
};
pub use optim::{clip_grad_norm, soft_update, AdamState};
pub use params::{ParamVector, Segment};

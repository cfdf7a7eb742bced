//! Small MLP regressors for the flow and score fields, with exact gradients
//! and an Adam optimizer.

mod mlp;
mod optim;

pub use mlp::{
    loss_grads, net_forward, net_init, param_count, time_features, Activation, FnField, LossGrads, NetParams,
    VectorField, ZeroField, DEFAULT_HIDDEN, TIME_FEATURES,
};
pub use optim::{clip_scale, global_norm, opt_step, OptimConfig, OptimState, StepInfo};

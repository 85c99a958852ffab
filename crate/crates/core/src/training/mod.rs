//! Masked-MSE objective, hand-written backpropagation, AdamW and the
//! online training loop.

mod backward;
mod loss;
mod optim;
mod trainer;

pub use backward::{backward, gradients, loss_and_gradients};
pub use loss::{masked_mse, masked_mse_grad, FIRST_SCORED_POSITION};
pub use optim::{adamw_step, adamw_update, AdamWConfig, OptimizerState};
pub use trainer::{
    eval_samples, evaluate, length_groups, per_sample_mse, sample_losses, train, LossTrace,
    TraceRow, TrainConfig, Trainer, DIVERGENCE_THRESHOLD,
};

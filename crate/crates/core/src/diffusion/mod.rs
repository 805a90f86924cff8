//! Compact denoising diffusion model.

mod checkpoint;
mod denoiser;
mod loss;
mod sampler;
mod schedule;

pub use checkpoint::Checkpoint;
pub use denoiser::{time_embedding, Activations, Denoiser, DenoiserManifest, DenoiserParams, Layout, NoisePredictor};
pub use loss::{
    batch_gradient, corrupt, draw_noise, example_loss_and_grad, forward_noise, loss_and_grad_with_draws,
    loss_and_per_example_grads, DiffusionBatchLoss, Example,
};
pub use sampler::{estimate_x0, sample, sample_labeled, sample_one, SamplerOptions};
pub use schedule::{NoiseSchedule, TERMINAL_ALPHA_BAR_MAX};

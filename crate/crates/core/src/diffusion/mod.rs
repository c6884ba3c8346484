//! Noise schedules, the class-conditional denoiser, its training loop and
//! the ancestral sampler with classifier-free guidance.

mod model;
mod sampler;
mod schedule;
mod train;

pub use model::{DenoiserConfig, DenoiserModel, DenoiserVars, EpsPredictor};
pub use sampler::{cfg_combine, sample, sample_until, SampleConfig, SampleOutput};
pub use schedule::{
    ddim_x0, ddim_x0_ab, ddpm_mean, ddpm_step, forward_noise, forward_noise_ab, forward_noise_rows, make_schedule,
    NoiseSchedule, ScheduleKind,
};
pub use train::{denoising_loss, estimate_loss, loss_and_grads, noised_batch, train, NoisedBatch, TrainConfig, Trained};

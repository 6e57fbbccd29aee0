//! Noise schedule, forward process, conditional noise predictor, ancestral
//! sampling and checkpoints.

mod checkpoint;
mod loss;
mod model;
mod sample;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use loss::{denoising_loss, denoising_loss_grad, DenoisingExample};
pub use model::{
    denoiser_forward, snapshot_reference, time_embedding, Activation, Arch, DenoiserModel,
    ForwardCache,
};
pub use sample::{sample, sample_batch};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind};

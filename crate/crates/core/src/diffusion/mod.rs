//! Conditional denoising diffusion over standardized log flows.

mod codec;
mod denoiser;
mod sample;
mod schedule;
mod train;

pub use codec::FlowCodec;
pub use denoiser::{predict_noise, time_embedding, Denoiser, DenoiserConfig};
pub use sample::{
    generate, generate_with_noise, sample_state, NoiseSource, PermutedNoise, RngNoise,
};
pub use schedule::{
    forward_sample, make_schedule, noised, NoiseSchedule, ReverseVariance, ScheduleKind,
};
pub use train::{train, LrSchedule, TrainConfig, TrainedModel, Trainer, TrainingCity};

//! Miniature latent-diffusion stack: schedule, DDIM, the toy denoiser and its
//! training loop.

pub mod model;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use model::{
    chw_to_pixels, pixels_to_chw, Architecture, AttentionKind, AttentionLayerInfo, BranchOutput,
    ForwardOptions, ForwardOutput, LayerBiases, StructureBranch, ToyDenoiser, NULL_TOKEN,
};
pub use sampler::{ddim_invert, ddim_sample, StepRecord, Trajectory};
pub use schedule::{
    add_noise, cfg_combine, ddim_inverse_step, ddim_step, make_schedule, NoiseSchedule,
};
pub use train::{sample_loss, train_toy, SampleGrads, TrainConfig, TrainExample, TrainedModel};

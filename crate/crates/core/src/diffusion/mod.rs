//! Conditional denoising diffusion: schedule, model, loss and training.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod schedule;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport, GradProbe};
pub use loss::{loss, loss_with_grad, LossParts};
pub use model::{DenoiseInput, Denoiser, DenoiserConfig, ParamGroup, TrainMode};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule};
pub use train::{StepMetrics, TrainConfig, TrainState, TrainerSettings};

//! Noise schedule, autoencoder and text-encoder interfaces, the U-Net
//! denoiser, the masked loss, the sampler and the checkpoint container.

mod autoencoder;
mod bundle;
pub mod checkpoint;
pub mod nn;
mod sampler;
mod schedule;
mod text;
pub mod unet;

pub use autoencoder::Autoencoder;
pub use bundle::{masked_mse, Batch, ConditioningPack, DenoiserBundle, FreezeFlags, ModelConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Stage};
pub use sampler::{ddim_sample, ddim_step, timestep_ladder, KnownRegion};
pub use schedule::{downsample_mask, forward_diffuse, make_schedule, NoiseSchedule, ScheduleKind, BETA_END, BETA_START};
pub use text::{DeskTextEncoder, TextEncoderConfig};

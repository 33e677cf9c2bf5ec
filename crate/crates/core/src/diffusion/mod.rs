//! Forward noising, reverse steps and the tappable UNet noise predictor.

mod sampling;
mod schedule;
mod train;
mod unet;

pub use sampling::{posterior_mean_from_eps, reverse_step, sample};
pub use schedule::{build_linear_schedule, q_sample, q_sample_batch, DiffusionConfig, VarianceSchedule};
pub use train::{load_backbone, save_backbone, train_backbone, BACKBONE_MAGIC, BACKBONE_VERSION};
pub use unet::{
    BlockInfo, BlockKind, BlockRef, BlockRegistry, NoisePredictor, DECODER_BLOCKS, ENCODER_BLOCKS,
};

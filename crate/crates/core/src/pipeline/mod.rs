//! Segmentation training and evaluation on top of the frozen encoders:
//! ablation variants, block/step sweeps and run directories.

mod config;
mod model;
mod run;
mod sweep;
mod train;

pub use config::{
    DataSection, ExperimentConfig, SelectionSection, TextSection, TrainConfig, TrainSection,
    Variant,
};
pub use model::{
    count_params, gradient_routing, GradientRouting, NativeRows, ParamCounts, PreparedImage,
    SegModel,
};
pub use run::RunDir;
pub use sweep::{join, sweep, Marginal, SweepCell, SweepTable};
pub use train::{
    evaluate, image_features, noise_seed, prepare, run_variant, train_segmenter, Components,
    ExperimentRecord, TrainRecord,
};

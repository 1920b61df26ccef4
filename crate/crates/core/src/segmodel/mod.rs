//! The desk-scale segmentation model: logistic heads over per-pixel features.

pub mod checkpoint;
pub mod features;
pub mod model;
pub mod predict;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
pub use features::{extract_features, FeatureContext, FeatureVector, BIAS, FEATURE_DIM};
pub use model::{forward_head, loss_and_grad, ModelConfig, ModelParams, ModelState, Sample};
pub use predict::{
    gaussian_blur, predict_instance, predict_region, predicted_box, ImageViews, PredictionMode,
    PredictionSet,
};
pub use train::{collect_samples, train, train_samples, ScheduleKind, Supervision, TrainSchedule};

//! Training, inference, the semantic mapping loop and evaluation.

pub mod commands;
pub mod metrics;
mod run;
mod train;

pub use metrics::{pixel_iou, point_accuracy, point_pr, ConfusionMatrix, IouReport, MetricsReport, PrReport};
pub use run::{
    ground_truth_point_labels, infer_video, point_label_pairs, run_semantic_mapping, track_video, LabelSource,
    MapConfig, MappingResult, PoseSource,
};
pub use train::{ground_truth_associations, train_network, TrainConfig};

//! Learned prediction pipeline: scene encoding, hierarchical heatmap
//! decoding and trajectory completion.

pub mod decoder;
pub mod encoder;
pub mod features;
pub mod hier;
pub mod trajectory;

pub use decoder::{train_decoder, HeatmapModel, ModelConfig, SceneEncoding, TrainConfig, TrainReport};
pub use encoder::SceneEncoder;
pub use hier::{decode_oracle, grid_point_budget, HeatCell, HierConfig, SparseHeatmap};
pub use trajectory::{evaluate_trajectory, train_trajectory, TrajectoryConfig, TrajectoryModel, TrajectoryTrainConfig};

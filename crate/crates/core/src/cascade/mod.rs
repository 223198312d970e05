//! Cascade training: stage planning, binned tree boosting, soft-cascade
//! calibration and the serialized model.

pub mod binned;
pub mod boost;
pub mod model;
pub mod plan;
pub mod train;
pub mod tree;

pub use binned::BinnedFeatures;
pub use boost::{boost_stage, Calibration};
pub use model::{BackboneBinding, CascadeModel, ScoreResult, Stage, TrainingMetadata};
pub use plan::{plan_stages, StagePlan};
pub use train::{train_multistage, TrainConfig, TrainImage, TrainReport};
pub use tree::{train_tree, DecisionTree, Node};

//! Full-video temporal action segmentation with a frame-resolution slow path
//! and a segment-pooled fast path.

pub mod backbones;
pub mod error;
pub mod featureio;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod objective;
pub mod slowfast;

pub use error::{Error, Result};
pub use featureio::{
    ClassMapping, FeatureFormat, FeatureLayout, FeatureSequence, LabelSequence, SyntheticSpec,
    VideoSample,
};
pub use graph::Mat;
pub use harness::{EpochRecord, OptimizerKind, TrainConfig, TrainLog, Trained};
pub use metrics::{ClassSet, EvaluationReport, FrameScores, SegmentList, SegmentalScores, VideoScores};
pub use objective::LossConfig;
pub use slowfast::{BackboneKind, Design, ModelKind, PoolKind, PoolingMode, SfTmn, SfTmnConfig};

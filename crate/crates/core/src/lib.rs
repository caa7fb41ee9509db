pub mod camera;
pub mod error;
pub mod lift;
pub mod learn;
pub mod loss;
pub mod metrics;
pub mod occlusion;
pub mod pipeline;
pub mod pool;
pub mod scenesim;

pub use error::{Error, Result};

pub use camera::{Camera, CameraExtrinsics, CameraIntrinsics, DistortionModel, ModelKind, Projection};
pub use learn::{TrainConfig, TrainSet, TrainState};
pub use lift::{DepthBins, LiftMode, LiftedPoints, RayGrid};
pub use loss::LossConfig;
pub use metrics::{EvalReport, SemanticClass};
pub use occlusion::{OcclusionConfig, OcclusionMap};
pub use pipeline::{DemoConfig, PipelineConfig};
pub use pool::{CameraGrids, GridSpec, PoolParams, PoolStrategy, Reduce};
pub use scenesim::{Scene, SceneParams};

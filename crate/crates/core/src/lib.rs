//! Scene-graph-guided neural surface reconstruction at desk scale.
//!
//! The library jointly optimizes a voxel-grid SDF radiance field, per-image
//! camera poses, and per-image inlier/outlier confidence scores over a scene
//! graph of posed images and keypoint matches. It ships a synthetic dataset
//! generator, a marching-cubes mesh extractor, and a full mesh/pose
//! evaluation suite (Chamfer, F-score, SG-W/SG-H pose errors).

pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod img;
pub mod iou;
pub mod mesh;
pub mod optim;
pub mod rng;
pub mod scene_graph;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{EvalInputs, EvalReport, PoseErrorEntry};
pub use field::{RaySample, RenderResult, VoxelField};
pub use geometry::{Intrinsics, Pose, Projection, Ray, Similarity};
pub use img::Image;
pub use iou::RayMoG;
pub use mesh::Mesh;
pub use optim::{BatchPlan, GradientSet, LossBreakdown};
pub use scene_graph::{Edge, Node, SceneGraph};
pub use trainer::{EpochReport, TrainConfig, Trainer};

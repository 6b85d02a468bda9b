//! Per-scene occupancy and flow fitting.
//!
//! This crate optimizes an explicit signed-distance grid plus a two-channel
//! horizontal flow grid against a posed multi-camera image sequence, using
//! occlusion-aware volume rendering for supervision. No learned components:
//! everything is fit per scene from photometric, flow-cue, and optional LiDAR
//! signals. A synthetic-scene oracle (analytic SDFs + sphere tracing) provides
//! ground truth for the test suite and for end-to-end recovery checks.
//!
//! Module map:
//! - [`grid`]: dense voxel fields, trilinear sampling, finite-difference
//!   operators, occupancy mapping
//! - [`geometry`]: cameras, rigid transforms, rays, reprojection
//! - [`renderer`]: logistic-SDF alpha compositing along rays
//! - [`supervision`]: photometric / flow / range losses, dynamic-static split
//! - [`optimizer`]: reverse-mode gradients, AdamW, the two-stage fit loop
//! - [`fusion`]: forward-only volume/BEV feature kernels
//! - [`metrics`]: depth, ray-based occupancy IoU, scene flow, velocity error
//! - [`synth`]: analytic scenes, sphere tracing, ground-truth view synthesis
//! - [`io`]: workspace layout, file codecs, run configuration

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod maps;
pub mod metrics;
pub mod optimizer;
pub mod renderer;
pub mod supervision;
pub mod synth;

pub use error::Error;
pub use fusion::{
    bev_volume_fuse, bfam, deformable_attention, ego_align, slices_to_volume, tpv_lift,
    volume_to_bev, BevSlices, DeformAttnParams, FeaturePlane, GateParams, KernelCheck,
};
pub use geometry::{Camera, FrameSet, Intrinsics, Ray, RigidTransform};
pub use grid::{FeatureVolume, GridSpec, OccupancyGrid, ScalarField, VectorField};
pub use io::{load_run_config, load_workspace, save_run_config, save_workspace, Manifest, RunConfig, Workspace};
pub use maps::{FlowMap, ImageRgb, MaskMap, ScalarMap};
pub use metrics::{
    depth_metrics, march_to_occupied, mave, panoramic_rays, ray_iou, scene_flow_metrics, DepthEvalConfig,
    DepthMetrics, RayIouConfig, RayIouReport, SceneFlowMetrics,
};
pub use optimizer::{far_wall_init, fit, AdamW, FitConfig, FitResult, IterStats};
pub use renderer::{RaySample, RenderParams};
pub use supervision::{
    BatchConfig, GradientBuffers, LossBreakdown, LossToggles, LossWeights, RayBatch, Supervisor,
};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

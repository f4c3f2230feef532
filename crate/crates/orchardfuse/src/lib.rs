//! Volumetric reconstruction and structural measurement of orchard trees.
//!
//! The library covers a full dormant-season scanning pipeline plus the pieces
//! needed to relate a dormant reconstruction to a later canopy-season scan:
//!
//! 1. [`ingest`]: depth/mask frame IO (16-bit PGM), labeled point cloud IO
//!    (PLY), capture manifests, and pinhole back-projection.
//! 2. [`fusion`]: truncated signed distance fusion of depth frames into a
//!    voxel volume and zero-crossing surface extraction with label voting.
//! 3. [`registration`]: point-to-point ICP, generalized ICP, and a voxelized
//!    variant for cross-season alignment of partially overlapping clouds.
//! 4. [`evaluation`]: alignment fitness, regression metrics, and per-class
//!    segmentation metrics with explicit undefined outcomes.
//! 5. [`measurement`]: trunk axis estimation, slab circle fits, branch
//!    clustering, and the tree-level measurement report.
//! 6. [`synth`]: a parametric tree generator and analytic depth renderer used
//!    as the ground-truth oracle for everything above.
//!
//! Everything internal is meters; millimeters and inches appear only in
//! report fields whose names carry the unit.

pub mod cli;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod ingest;
pub mod measurement;
pub mod registration;
pub mod spatial;
pub mod synth;

pub use geometry::{
    apply_transform, se3_exp, se3_log, CameraIntrinsics, LabeledPointCloud, PointLabel,
    RigidTransform, Twist, Vec3,
};

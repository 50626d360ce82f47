//! Multi-robot smoothing and mapping.
//!
//! Each robot's trajectory and landmark map is solved as a sparse nonlinear
//! least-squares problem. Two local maps are aligned by RANSAC over shared
//! landmark ids, and the alignment anchors the second robot's origin in a
//! joint bundle adjustment that yields one merged map.

pub mod align;
pub mod geometry;
pub mod io;
pub mod merge;
pub mod models;
pub mod simgen;
pub mod solver;
pub mod sparse;

pub use align::{ransac_align, AlignError, AlignmentResult, Correspondence, RansacConfig};
pub use geometry::{wrap_angle, Landmark2, Pose2, Se2Transform, StateLayout, StateVector, VarId};
pub use io::Dataset;
pub use merge::{GlobalMap, MergeError, MergePlan};
pub use models::{NoiseModel, RobotParams};
pub use solver::{FactorGraph, OdometryLinearization, SolveConfig, SolveError, SolveResult};

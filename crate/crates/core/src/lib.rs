//! Rigid point cloud registration in Kendall pre-shape space.
//!
//! Both clouds are simplified to the same number of uniformly spread points,
//! normalized for translation and scale, aligned by exhaustive search over a
//! discrete rotation grid (and, for partial scans, a grid of candidate
//! centres) and finally refined with point-to-point ICP.

pub mod align;
pub mod bench;
pub mod cloud;
pub mod error;
pub mod icp;
pub mod index;
pub mod io;
pub mod parallel;
pub mod partial;
pub mod preshape;
pub mod simplify;
pub mod transform;

pub use align::{register, AlignmentResult, EnergyParams, EnergyVariant, RegisterConfig, RotationGrid};
pub use cloud::{bounding_box, BoundingBox, Point3, PointCloud};
pub use error::{Error, Result};
pub use index::{average_knn_distance, build_index, SpatialIndex};
pub use io::{load_cloud, save_cloud, CloudFormat};
pub use partial::register_partial;
pub use preshape::{to_preshape, PreShape, ScaleDef};
pub use transform::{RigidTransform, Similarity};

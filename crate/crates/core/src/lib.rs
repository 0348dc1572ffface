pub mod error;
pub mod geometry;
pub mod lstg;
pub mod mesh;

pub use error::{Error, ErrorClass, Result};
pub use geometry::{Aabb, Vec3};
pub use mesh::{PointCloud, TriMesh};
pub mod bvh;
pub mod sdf;
pub mod grids;
pub mod tensor;
pub mod surface;
pub mod nn;
pub mod metrics;
pub mod occlusion;
pub mod reference;

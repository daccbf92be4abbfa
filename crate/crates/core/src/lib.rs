pub mod conic_conv;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod gradcheck;
pub mod network;
pub mod persist;
pub mod nn;
pub mod scalar;
pub mod sphere_sampling;
pub mod synth_data;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, ImagePoint, UnitDirection};
pub use scalar::Scalar;
pub use sphere_sampling::SphericalCap;
pub use tensor::{Param, Shape4, Tensor4};

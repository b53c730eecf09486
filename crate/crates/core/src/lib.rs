//! Tangram assembly from silhouettes: geometry, rasterization, the placement
//! environment and the learning machinery around it.

pub mod bc;
pub mod env;
pub mod eval;
pub mod geometry;
pub mod oracle;
pub mod policy;
pub mod ppo;
pub mod raster;
pub mod scalar;
pub mod targetgen;

pub use scalar::Scalar;

/// Double-precision geometry, as used by the environment.
pub type Point = geometry::Point<f64>;
pub type Polygon = geometry::Polygon<f64>;
pub type Pose = geometry::Pose<f64>;
pub type Piece = geometry::Piece<f64>;
pub type Frame = raster::Frame<f64>;
pub type Raster = raster::Raster<f64>;

/// The network as trained; checks run the same code at `f64`.
pub type Policy = policy::PolicyNet<f32>;
pub type Params = policy::Params<f32>;
pub type ActionDistribution = policy::ActionDistribution<f32>;

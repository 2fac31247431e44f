//! Multi-view 3D edge reconstruction with oriented Gaussian splats.
//!
//! Edge maps supervise a cloud of anisotropic 3D Gaussians whose means settle
//! on scene edges and whose longest axes follow the edge tangent. The trained
//! cloud is turned into oriented points, chained into clusters, and each
//! cluster is fitted with a line segment or a cubic Bézier curve.
//!
//! Numeric modules are generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the scalar to `f64`, which the CLI and checkpoints use.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod extract;
pub mod geom;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod render;
pub mod scalar;
pub mod spatial;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type Gaussian = geom::EdgeGaussian<Real>;
pub type Camera = geom::CameraView<Real>;
pub type Edge = geom::ParametricEdge<Real>;
pub type OrientedPoint = geom::OrientedPoint<Real>;
pub type Image = image::GrayImage<Real>;

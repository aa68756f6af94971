//! Keypoint-driven image registration.
//!
//! A convolutional detector predicts corresponding keypoints in a moving and
//! a fixed image; an affine map or a thin-plate spline is then solved from
//! those keypoints in closed form and used to resample the moving image. The
//! whole pipeline is differentiable, so the detector trains end to end.

pub mod autodiff;
pub mod detector;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod registration;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod transforms;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::NdTensor;

//! Pixel-aligned Gaussian splatting lifted from single RGB-D images, with
//! a differentiable tile rasterizer, cycle-aggregative self-supervision
//! across synthesized viewpoints, and geometry-guided refinement of
//! novel-view artifacts.
//!
//! The crate is organized bottom-up:
//!
//! - [`gaussian`]: primitives, sets, activations and covariance.
//! - [`camera`]: pinhole camera, rigid poses and orbits.
//! - [`raster`]: forward/backward EWA splatting and depth-derived normals.
//! - [`lift`]: RGB-D + attribute maps to a pixel-aligned set.
//! - [`aggregate`]: alpha binarization, complementary masks, concat.
//! - [`losses`]: reconstruction, cycle, photometric, surrogate, TV.
//! - [`refine`]: artifact masks, arc sampling, in-painting, video loss.
//! - [`train`]: predictors, camera sampling, training steps and loops.
//! - [`io`] and [`metrics`]: file formats, checkpoints, evaluation.
//! - [`fixtures`]: deterministic synthetic scenes.

pub mod aggregate;
pub mod camera;
pub mod error;
pub mod fixtures;
pub mod gaussian;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod lift;
pub mod losses;
pub mod metrics;
pub mod predictor;
pub mod pushpull;
pub mod raster;
pub mod refine;
pub mod train;

pub use error::{Error, Result};

//! Omnidirectional depth from four cardinal fisheye cameras.
//!
//! Images are swept over inverse-depth hypotheses onto a shared
//! equirectangular grid, back-to-back pairs are stitched into two 360
//! degree feature volumes whose variance is the matching cost, and the
//! regressed disparity can be refined by a self-supervised pseudo-stereo
//! objective on the two stitched panoramas.

pub mod config;
pub mod cost;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pseudo_stereo;
pub mod refine;
pub mod rig;
pub mod scene;
pub mod sphere;
pub mod sum;

pub use error::{Error, Result};

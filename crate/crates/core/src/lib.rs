//! Underwater image pipeline: physics-based synthesis of underwater
//! degradation from RGB-D sources, unpaired domain adaptation of the
//! synthetic images toward a real-underwater corpus, a residual restoration
//! network trained on the adapted pairs, and image quality metrics.
//!
//! All numeric work runs in `f64` on an in-repo autodiff engine and is
//! bit-deterministic for a fixed seed, including under the `parallel`
//! feature (enabled by default).

pub mod checkpoint;
pub mod config;
pub mod datasetgen;
pub mod error;
pub mod formation;
pub mod imageio;
pub mod losses;
pub mod quality;
pub mod restoration;
pub mod seeding;
pub mod translation;

pub use error::{Error, Result, ResultExt};

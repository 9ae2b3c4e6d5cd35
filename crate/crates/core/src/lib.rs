//! Uncertainty quantification for promptable segmentation: Monte-Carlo
//! entropy decomposition, post-hoc IoU heads over model tokens, and the
//! correction-curve evaluation protocol, with a deterministic synthetic
//! segmentation backend for testing.

pub mod backend;
pub mod bayes;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod mlp;
pub mod sampling;
pub mod seed;
pub mod usam;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

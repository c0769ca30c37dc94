//! Dense deformable registration network for 3D volumes.

pub mod binio;
pub mod error;
pub mod eval;
pub mod field;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod model;
pub mod patches;
pub mod render;
pub mod tensor;
pub mod train;
pub mod volume;
pub mod warp;

pub use error::{DdnError, Result};

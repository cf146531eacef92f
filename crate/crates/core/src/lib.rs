pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mask;
pub mod model;
pub mod msm;
pub mod policies;
pub mod pyramid;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

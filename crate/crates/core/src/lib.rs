pub mod camera;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod perceptual;
pub mod pngio;
pub mod render;
pub mod tape;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};

//! Sharp radiance-field reconstruction from blurry multi-view images.

pub mod autodiff;
pub mod blur;
pub mod dsk;
pub mod error;
pub mod field;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod renderer;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

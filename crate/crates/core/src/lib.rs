pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod mask;
pub mod matcher;
pub mod net;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod visual;

pub use error::{Error, Result};

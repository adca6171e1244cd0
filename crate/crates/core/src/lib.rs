//! A learned image codec whose analysis transform doubles as a perceptual
//! distance and as a perceptual loss network.

pub mod apps;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod image;
pub mod io;
pub mod metric;
pub mod quality;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use image::{ImageTensor, Padding};

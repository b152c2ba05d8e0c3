pub mod align;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod loss;
pub mod network;

pub use error::{PrnError, Result};

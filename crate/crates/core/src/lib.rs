pub mod analysis;
pub mod coreset;
pub mod databench;
pub mod error;
pub mod evalsuite;
pub mod model;
pub mod numcore;
pub mod runner;
pub mod unlearn;

pub use error::{Error, Result};

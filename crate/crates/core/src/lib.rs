mod error;
pub mod data;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod ops;
pub mod training;

pub use error::{Error, Result};

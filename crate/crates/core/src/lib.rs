pub mod error;
pub mod estimation;
pub mod averaging;
pub mod cml;
pub mod gauss;
pub mod harness;
pub mod model;
pub mod selection;

pub use error::{Error, Result};

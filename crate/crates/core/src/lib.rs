pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampling;

pub use error::{Error, Result};

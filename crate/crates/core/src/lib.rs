pub mod autodiff;
pub mod digest;
pub mod error;
pub mod featio;
pub mod gradcheck;
pub mod metrics;
pub mod mi;
pub mod neck;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, ErrorClass, Result};

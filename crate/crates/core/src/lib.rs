pub mod autodiff;
mod bytes;
pub mod error;
pub mod harness;
pub mod keytoken;
pub mod loss;
pub mod model;
pub mod quant;
pub mod search;
pub mod toy;

pub use error::{Error, Result};

pub mod data_io;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod refinement;
pub mod tokenization;

pub use error::{Error, Result};

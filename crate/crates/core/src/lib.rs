pub mod codec;
pub mod container;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod nclm;
pub mod nn;
pub mod synthcorpus;
pub mod visual;

pub use error::{Error, Result};

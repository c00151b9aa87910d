pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod training;

pub use error::{Error, Result};

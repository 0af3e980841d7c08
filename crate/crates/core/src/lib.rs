pub mod analysis;
pub mod datagen;
pub mod distill;
pub mod ensemble;
pub mod experiment;
pub mod error;
pub mod metrics;
pub mod model;
pub mod vocab;

pub use error::{ConfigIssue, Error, Result};

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod srb;
pub mod tokenizer;
pub mod transformer;

pub use error::{HimodeError, Result};

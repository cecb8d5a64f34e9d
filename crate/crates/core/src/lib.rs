pub mod artifact;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod learners;
pub mod meta;
pub mod pipeline;
pub mod sim;
pub mod stack;
pub mod util;

pub use error::{Error, Result};

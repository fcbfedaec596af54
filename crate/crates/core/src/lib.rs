pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod model;
pub mod peft;
pub mod methods;
pub mod data;
pub mod metrics;
pub mod runner;

pub mod codec;
pub mod env;
pub mod error;

pub use error::{Error, Result};
pub mod demo;
pub mod policy;
pub mod learner;
pub mod config;
pub mod curriculum;
pub mod eval;
pub mod bench;
pub mod service;

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod expert;
pub mod export;
pub mod idem;
pub mod model;
pub mod nn;
pub mod sem;
pub mod train;
pub mod util;
pub mod vlb;

pub use error::{Error, Result};

pub mod attack;
pub mod dataset;
pub mod defense;
pub mod error;
pub mod experiments;
pub mod models;
pub mod schema;
pub mod seed;

pub use error::{Error, ErrorKind, Result};

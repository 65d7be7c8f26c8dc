pub mod baseline;
pub mod checkpoint;
pub mod compression;
pub mod config;
pub mod data;
pub mod error;
pub mod he;
pub mod metrics;
pub mod nca;
pub mod netsim;
pub mod payload;
pub mod protocol;
pub mod training;

pub use error::{Error, Result};

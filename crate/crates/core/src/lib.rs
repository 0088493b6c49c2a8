//! Random Lorenz-like interval maps, their escape and return partitions,
//! the induced random tower, and quenched correlation estimates.

pub mod correlation;
pub mod error;
pub mod escape_engine;
pub mod fit;
pub mod interval_partition;
pub mod kv;
pub mod map_family;
pub mod measure;
mod pieces;
pub mod random_driver;
pub mod return_engine;
pub mod tower;

pub use error::{Error, Result};
pub use pieces::{RunStats, SidePath};

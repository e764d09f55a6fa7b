pub mod deploy;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod network;
pub mod ordinal;
pub mod synthdata;
pub mod trainer;
pub mod transduction;
pub mod types;

pub use error::{Error, Result};

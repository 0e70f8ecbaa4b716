pub mod bagio;
mod binfmt;
pub mod cli;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod mil;
pub mod numerics;
pub mod probing;
pub mod sae;

pub use error::{Error, Result};

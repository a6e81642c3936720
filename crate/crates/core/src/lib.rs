pub mod error;
pub mod gfn;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod sft;
pub mod tasks;

pub use error::{Error, Result};

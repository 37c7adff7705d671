//! Memory-propagation video matting on a small CPU model.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod losses;
pub mod memory;
pub mod network;
pub mod synthdata;
pub mod training;
pub mod types;

pub use error::{Error, Result};

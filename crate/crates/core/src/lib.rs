pub mod aucodes;
pub mod augment;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod pipeline;
pub mod rngs;
pub mod sampling;
pub mod store;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};

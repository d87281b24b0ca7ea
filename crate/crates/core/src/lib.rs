pub mod attack;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod surrogate;
pub mod wmnet;

pub use error::{Error, Result};

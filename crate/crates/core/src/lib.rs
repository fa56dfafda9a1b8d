pub mod capacity;
pub mod cli;
pub mod commsim;
pub mod error;
pub mod losses;
pub mod quadrature;
pub mod router;
pub mod special;
pub mod topology;
pub mod toymoe;

pub use error::{Error, Result};

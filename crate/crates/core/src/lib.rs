pub mod baths;
pub mod charge;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod lattice;
pub mod plot;
pub mod register;
pub mod sequences;
pub mod spin;
pub mod units;

pub use error::{Error, Result};

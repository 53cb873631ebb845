pub mod coeff;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod fock;
pub mod observables;
pub mod sparse;
pub mod table;

pub use error::{CradleError, Result};

pub mod brownian;
pub mod bsde;
pub mod comparison;
pub mod error;
pub mod export;
pub mod families;
pub mod forward;
pub mod grid;
pub mod law;
pub mod markov;
pub mod pde;
pub mod parallel;
pub mod regression;
pub mod runner;
pub mod scenario;
pub mod stats;

pub use error::{Error, Result};

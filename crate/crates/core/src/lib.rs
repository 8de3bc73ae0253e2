pub mod cli;
pub mod error;
pub mod kernels;
pub mod markov;
pub mod operator;
pub mod params;
pub mod sim;
pub mod stability;
pub mod traffic;

pub use error::{Error, Result};

pub mod aqml;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod neural;
pub mod qnn;
pub mod sim;

pub use error::{Error, Result};

pub mod error;
pub mod grid;
pub mod icnn;
pub mod controller;
pub mod opf;
pub mod learn;
pub mod sim;
pub mod verify;
pub mod plot;
pub mod cli;

pub use error::{Error, Result};

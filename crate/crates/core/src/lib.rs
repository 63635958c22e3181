pub mod attention;
pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod generation;
pub mod gfsid;
pub mod losses;
pub mod model;
pub mod params;
pub mod training;

pub use error::{Error, Result};

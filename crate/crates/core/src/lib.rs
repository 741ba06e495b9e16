pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod losses;
pub mod model;
pub mod msh;
pub mod nn;
pub mod pipeline;
pub mod spatial;
pub mod training;
pub mod temporal;

pub use error::{Error, Result};

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod pairgen;
pub mod training;

pub use error::{Error, Result};

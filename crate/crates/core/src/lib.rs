pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod geo_attention;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod sem_group;
pub mod synth;

pub use error::{Error, Result};

pub mod augment;
pub mod cascade;
pub mod bootstrap;
pub mod checkpoint;
pub mod config;
pub mod classifier;
pub mod dataio;
pub mod detector;
pub mod domaingan;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imageio;
pub mod nn;
pub mod pixelnet;
pub mod synthetic;
pub mod train;
pub mod types;

pub use error::{Error, Result};

pub mod attacks;
pub mod classifier;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod generator;
pub mod io;
pub mod nn;
pub mod predictors;
pub mod synth;
pub mod views;

pub use error::{Error, Result};

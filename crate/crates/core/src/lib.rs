pub mod dsp;
pub mod dataset;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod midi;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod role;
pub mod seed;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
pub use role::TrackRole;

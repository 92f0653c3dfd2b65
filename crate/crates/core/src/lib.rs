pub mod acoustic_model;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod speaker_encoder;
pub mod trainer;

pub use error::{Error, Result};

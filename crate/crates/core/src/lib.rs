pub mod audio_io;
pub mod config;
pub mod dsp;
pub mod error;
pub mod evaluation;
mod external;
pub mod losses;
pub mod nets;
pub mod nn;
pub mod surrogates;
pub mod tensor_io;
pub mod training;
pub mod transcription;

pub use error::{Error, Result};

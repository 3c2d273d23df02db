//! Text and audio psychiatric-classification pipeline at desk scale.

pub mod acoustic;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod io;
pub mod labels;
pub mod nn;
pub mod predictions;
pub mod tokenizer;
pub mod transcript;

pub use error::{Error, ErrorKind, Result};

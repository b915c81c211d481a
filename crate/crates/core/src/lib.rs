pub mod error;
pub mod gradcheck;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub mod benchmark;
pub mod cli;
pub mod corpus;
mod io_util;
pub mod model;
pub mod tokenizer;
pub mod training;

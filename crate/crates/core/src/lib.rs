pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod exec;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod tokenize;

pub use error::{Error, Result};

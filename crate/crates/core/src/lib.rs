pub mod bench;
pub mod bm25;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkernel;
pub mod pipeline;
pub mod retrieval;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

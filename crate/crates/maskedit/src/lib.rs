//! File formats, the shapes corpus, the toy segmenter, the caption-editing
//! LLM client and the benchmark tooling around `maskedit-core`.

pub mod benchmark;
pub mod cli;
pub mod error;
pub mod io;
pub mod llm;
pub mod segment;
pub mod shapes;
pub mod weights;

pub use error::{Error, Result};
